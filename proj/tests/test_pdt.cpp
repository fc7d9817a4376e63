#include <gtest/gtest.h>

#include "padiff/error.hpp"
#include "padiff/pdt.hpp"
#include "support.hpp"

using namespace padiff;
using namespace padiff::pdt;
using padiff::testing::Gen;
using padiff::testing::max_abs;

namespace {

PDTConfig small_config() {
  auto c = PDTConfig::desk();
  c.inner_channel = 8;
  c.channel_multipliers = {1, 2};
  c.norm_groups = 4;
  c.image_size = 8;
  c.attention_resolution = 8;
  c.dropout = 0.0;
  return c;
}

ConditionBundle random_bundle(Gen& g, int64_t b, int64_t h, int64_t w) {
  return {g.tensor({b, 3, h, w}, -2.0, 2.0), g.tensor({b, 3, h, w}, -1.0, 1.0),
          g.tensor({b, 3, h, w}, 0.05, 1.0)};
}

void expect_row_stochastic(const torch::Tensor& attn) {
  EXPECT_GE(attn.min().item<double>(), 0.0);
  EXPECT_LT((attn.sum(-1) - 1.0).abs().max().item<double>(), 1e-6);
}

}  // namespace

TEST(PDTConfig, Validation) {
  EXPECT_NO_THROW(PDTConfig::desk().validate());
  EXPECT_NO_THROW(PDTConfig::full().validate());
  auto c = PDTConfig::desk();
  c.channel_multipliers.clear();
  EXPECT_THROW(c.validate(), DomainError);
  c = PDTConfig::desk();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), DomainError);
  c = PDTConfig::desk();
  c.norm_groups = 5;
  EXPECT_THROW(c.validate(), DomainError);
  c = PDTConfig::desk();
  c.ffn_kernel_sizes = {4};
  EXPECT_THROW(c.validate(), DomainError);
}

TEST(PDTConfig, AttentionPlacement) {
  auto t = PDTConfig::full();
  // 256, 128, 64, 32, 16: only the coarsest stage is at the attention resolution.
  EXPECT_FALSE(t.stage_has_attention(0));
  EXPECT_FALSE(t.stage_has_attention(3));
  EXPECT_TRUE(t.stage_has_attention(4));
  EXPECT_EQ(t.stage_channels(), (std::vector<int64_t>{48, 96, 192, 384, 384}));
}

TEST(TimeEmbedding, DistinctStepsDistinctEmbeddings) {
  torch::manual_seed(1);
  TimeEmbedding te(16);
  te->to(torch::kFloat64);
  auto t = torch::arange(1, 2001, torch::kLong);
  auto s = TimeEmbeddingImpl::sinusoid(t, 16).to(torch::kFloat64);
  auto d = torch::cdist(s, s) + torch::eye(2000, torch::kFloat64);
  EXPECT_GT(d.min().item<double>(), 0.0);
  EXPECT_EQ(te->forward(torch::tensor({1, 2}, torch::kLong)).size(1), 64);
}

TEST(CrossAttention, RowsStochasticAndShapes) {
  torch::manual_seed(2);
  Gen g(2);
  for (int64_t c : {8, 16, 32}) {
    CrossAttention cam(3, c);
    cam->to(torch::kFloat64);
    auto [out, attn] = cam->forward_with_attention(g.tensor({2, 3, 4, 5}, 0.0, 1.0), g.normal({2, c, 4, 5}));
    EXPECT_EQ(out.sizes(), (std::vector<int64_t>{2, c, 4, 5}));
    expect_row_stochastic(attn);
  }
}

TEST(CrossAttention, ConstantKeysGiveMeanOfValues) {
  torch::manual_seed(3);
  Gen g(3);
  CrossAttention cam(3, 8);
  cam->to(torch::kFloat64);
  {
    torch::NoGradGuard ng;
    cam->key_projection()->weight.zero_();
  }
  auto prior = g.tensor({1, 3, 4, 4}, 0.0, 1.0);
  auto out = cam->forward(prior, g.normal({1, 8, 4, 4}));
  auto values = cam->value_projection()(prior);
  auto mean = values.mean({2, 3}, true).expand_as(values);
  EXPECT_LT(max_abs(out, mean), 1e-12);
  EXPECT_THROW(cam->forward(g.tensor({1, 3, 4, 5}, 0.0, 1.0), g.normal({1, 8, 4, 4})), ShapeError);
}

TEST(PhysicsAwareSelfAttention, ZeroValueProjectionIsIdentity) {
  torch::manual_seed(4);
  Gen g(4);
  PhysicsAwareSelfAttention pa(8, 32, 4);
  pa->to(torch::kFloat64);
  pa->zero_value_projection();
  auto f = g.normal({2, 8, 4, 4});
  auto [out, attn] = pa->forward_with_attention(f, g.normal({2, 8, 4, 4}), g.normal({2, 32}));
  EXPECT_TRUE(torch::equal(out, f));
  expect_row_stochastic(attn);
  EXPECT_GT(pa->alpha().item<double>(), 0.0);
}

TEST(PhysicsAwareSelfAttention, ArgmaxStableUnderTemperatureProperty) {
  torch::manual_seed(5);
  Gen g(5);
  PhysicsAwareSelfAttention pa(8, 32, 4);
  pa->to(torch::kFloat64);
  torch::NoGradGuard ng;
  for (int i = 0; i < 10; ++i) {
    auto f = g.normal({1, 8, 4, 4}), cam = g.normal({1, 8, 4, 4}), te = g.normal({1, 32});
    auto base = pa->forward_with_attention(f, cam, te).second.argmax(-1);
    pa->log_alpha() += std::log(2.0);
    auto doubled = pa->forward_with_attention(f, cam, te).second.argmax(-1);
    pa->log_alpha() -= std::log(2.0);
    EXPECT_TRUE(torch::equal(base, doubled));
  }
}

TEST(PhysicsPerceptionUnit, EstimateContracts) {
  torch::manual_seed(6);
  Gen g(6);
  PhysicsPerceptionUnit ppu(8, 4, 4);
  ppu->to(torch::kFloat64);
  auto x = g.normal({2, 8, 5, 6});
  auto est = ppu->estimate(x);
  EXPECT_EQ(est.background.flatten(2).var(2, false).max().item<double>(), 0.0);
  for (const auto& gate : {est.t1, est.t2}) {
    EXPECT_GT(gate.min().item<double>(), 0.0);
    EXPECT_LT(gate.max().item<double>(), 1.0);
    EXPECT_EQ(gate.sizes(), x.sizes());
  }
  auto perm = torch::randperm(30, g.torch_gen(), torch::kLong);
  auto shuffled = x.flatten(2).index_select(2, perm).view_as(x);
  EXPECT_LT(max_abs(ppu->estimate(shuffled).background, est.background), 1e-12);
}

TEST(PhysicsPerceptionUnit, CombineExamplesAndLinearity) {
  Gen g(7);
  auto f = g.normal({1, 4, 3, 3}), b = g.normal({1, 4, 3, 3});
  auto one = torch::ones_like(f), zero = torch::zeros_like(f);
  EXPECT_TRUE(torch::equal(PhysicsPerceptionUnitImpl::combine(f, one, zero, b), f));
  EXPECT_TRUE(torch::equal(PhysicsPerceptionUnitImpl::combine(f, zero, one, b), b));
  auto v = PhysicsPerceptionUnitImpl::combine(torch::full({1, 1, 1, 1}, 2.0), torch::full({1, 1, 1, 1}, 0.5),
                                              torch::full({1, 1, 1, 1}, 0.25), torch::full({1, 1, 1, 1}, 4.0));
  EXPECT_EQ(v.item<double>(), 2.0);
  auto t1 = g.tensor({1, 4, 3, 3}, 0.0, 1.0);
  auto y = g.normal({1, 4, 3, 3});
  const double a = g.uniform(-2, 2), c = g.uniform(-2, 2);
  auto lhs = PhysicsPerceptionUnitImpl::combine(a * f + c * y, t1, zero, b);
  auto rhs = a * PhysicsPerceptionUnitImpl::combine(f, t1, zero, b) +
             c * PhysicsPerceptionUnitImpl::combine(y, t1, zero, b);
  EXPECT_LT(max_abs(lhs, rhs), 1e-12);
  EXPECT_THROW(PhysicsPerceptionUnitImpl::combine(f, g.normal({1, 4, 2, 3}), zero, b), ShapeError);
}

TEST(GatedMultiScaleFFN, ZeroProjectionIdentityAndShapes) {
  torch::manual_seed(8);
  Gen g(8);
  for (const auto& ks : std::vector<std::vector<int64_t>>{{3}, {3, 5}, {3, 5, 7}}) {
    GatedMultiScaleFFN ffn(8, 2.66, ks, 4, 0.0);
    ffn->to(torch::kFloat64);
    auto x = g.normal({2, 8, 6, 6});
    EXPECT_EQ(ffn->forward(x).sizes(), x.sizes());
    {
      torch::NoGradGuard ng;
      ffn->output_projection()->weight.zero_();
    }
    EXPECT_TRUE(torch::equal(ffn->forward(x), x));
  }
}

TEST(GatedMultiScaleFFN, ExpansionGradientMatchesFiniteDifferences) {
  torch::manual_seed(9);
  Gen g(9);
  GatedMultiScaleFFN ffn(8, 2.66, std::vector<int64_t>{3, 5}, 4, 0.0);
  ffn->to(torch::kFloat64);
  auto x = g.normal({1, 8, 5, 5}), w = g.normal({1, 8, 5, 5});
  auto f = [&] { return (ffn->forward(x) * w).sum(); };
  f().backward();
  auto& weight = ffn->expansion()->weight;
  torch::NoGradGuard ng;
  auto flat = weight.view(-1);
  for (int i = 0; i < 5; ++i) {
    const auto idx = g.integer(0, flat.numel() - 1);
    const double orig = flat[idx].item<double>();
    const double h = 1e-6;
    flat[idx] = orig + h;
    const double fp = f().item<double>();
    flat[idx] = orig - h;
    const double fm = f().item<double>();
    flat[idx] = orig;
    const double analytic = weight.grad().view(-1)[idx].item<double>();
    EXPECT_LE(std::abs((fp - fm) / (2 * h) - analytic), 1e-3 * std::max(std::abs(analytic), 1e-8));
  }
}

TEST(PDTBlock, ZeroedResidualsIdentityAndFinite) {
  torch::manual_seed(10);
  Gen g(10);
  auto cfg = small_config();
  for (bool attention : {true, false}) {
    PDTBlock block(8, 32, cfg, attention);
    block->to(torch::kFloat64);
    auto x = g.normal({2, 8, 4, 4}) * 10.0;
    auto prior = g.tensor({2, 3, 4, 4}, 0.05, 1.0);
    auto te = g.normal({2, 32});
    EXPECT_TRUE(torch::isfinite(block->forward(x, prior, te)).all().item<bool>());
    block->zero_residual_branches();
    EXPECT_TRUE(torch::equal(block->forward(x, prior, te), x));
  }
}

TEST(PDTBlock, ZeroValueMixerPassesInputExactly) {
  torch::manual_seed(11);
  Gen g(11);
  PDTBlock block(8, 32, small_config(), true);
  block->to(torch::kFloat64);
  block->pa_sa()->zero_value_projection();
  auto x = g.normal({1, 8, 4, 4});
  EXPECT_TRUE(torch::equal(block->mix(x, g.tensor({1, 3, 4, 4}, 0.05, 1.0), g.normal({1, 32})), x));
}

TEST(PDTBlock, DirectionalDerivativeMatchesFiniteDifferences) {
  torch::manual_seed(12);
  Gen g(12);
  PDTBlock block(8, 32, small_config(), true);
  block->to(torch::kFloat64);
  auto x = g.normal({1, 8, 4, 4}).requires_grad_();
  auto prior = g.tensor({1, 3, 4, 4}, 0.05, 1.0);
  auto te = g.normal({1, 32});
  auto w = g.normal({1, 8, 4, 4});
  auto v = g.normal({1, 8, 4, 4});
  (block->forward(x, prior, te) * w).sum().backward();
  const double analytic = (x.grad() * v).sum().item<double>();
  torch::NoGradGuard ng;
  const double h = 1e-6;
  const double fp = (block->forward(x + h * v, prior, te) * w).sum().item<double>();
  const double fm = (block->forward(x - h * v, prior, te) * w).sum().item<double>();
  EXPECT_LE(std::abs((fp - fm) / (2 * h) - analytic), 1e-3 * std::abs(analytic));
}

TEST(PDTDenoiser, OutputShapesAndDeterminism) {
  torch::manual_seed(13);
  Gen g(13);
  PDTDenoiser net(PDTConfig::desk());
  net->eval();
  torch::NoGradGuard ng;
  for (int64_t s : {32, 64}) {
    auto x = g.normal({1, 3, s, s}, torch::kFloat32);
    auto cond = random_bundle(g, 1, s, s);
    cond = {cond.x_c.to(torch::kFloat32), cond.background.to(torch::kFloat32),
            cond.transmission.to(torch::kFloat32)};
    auto t = torch::tensor({500}, torch::kLong);
    auto out = net->forward(x, cond, t);
    EXPECT_EQ(out.sizes(), (std::vector<int64_t>{1, 3, s, s}));
    EXPECT_TRUE(torch::equal(out, net->forward(x, cond, t)));
  }
}

TEST(PDTDenoiser, EveryAttentionMapRowStochastic) {
  torch::manual_seed(14);
  Gen g(14);
  auto cfg = PDTConfig::desk();
  cfg.image_size = 32;
  PDTDenoiser net(cfg);
  AttentionProbe probe;
  net->set_attention_probe(&probe);
  torch::NoGradGuard ng;
  auto cond = random_bundle(g, 2, 32, 32);
  net->to(torch::kFloat64);
  net->forward(g.normal({2, 3, 32, 32}), cond, torch::tensor({1, 2000}, torch::kLong));
  ASSERT_FALSE(probe.maps.empty());
  for (const auto& m : probe.maps) expect_row_stochastic(m);
}

TEST(PDTDenoiser, MisalignedConditionRejected) {
  torch::manual_seed(15);
  Gen g(15);
  PDTDenoiser net(small_config());
  net->to(torch::kFloat64);
  auto cond = random_bundle(g, 1, 8, 4);
  EXPECT_THROW(net->forward(g.normal({1, 3, 8, 8}), cond, torch::tensor({3}, torch::kLong)), ShapeError);
}
