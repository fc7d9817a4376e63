#include <gtest/gtest.h>

#include "padiff/error.hpp"
#include "padiff/physics.hpp"
#include "padiff/ppg.hpp"
#include "support.hpp"

using namespace padiff;
using namespace padiff::ppg;
using padiff::testing::Gen;
using padiff::testing::max_abs;

namespace {

DynamicConv make_dc(int64_t in, int64_t out, int64_t k) {
  DynamicConvOptions o;
  o.in_channels = in;
  o.out_channels = out;
  o.num_kernels = k;
  DynamicConv dc(o);
  dc->to(torch::kFloat64);
  return dc;
}

}  // namespace

TEST(DynamicConv, OneHotGateMatchesSingleKernel) {
  torch::manual_seed(1);
  auto dc = make_dc(3, 5, 2);
  Gen g(1);
  auto x = g.normal({2, 3, 6, 7});
  auto gate = torch::tensor({{1.0, 0.0}, {1.0, 0.0}}, torch::kFloat64);
  auto expected = torch::conv2d(x, dc->kernel_bank()[0], dc->bias_bank()[0], 1, 1);
  EXPECT_LT(max_abs(dc->forward_with_gate(x, gate), expected), 1e-12);
}

TEST(DynamicConv, OpposedKernelsCancel) {
  torch::manual_seed(2);
  auto dc = make_dc(3, 4, 2);
  torch::NoGradGuard ng;
  dc->kernel_bank()[1].copy_(-dc->kernel_bank()[0]);
  dc->bias_bank().zero_();
  Gen g(2);
  auto x = g.normal({1, 3, 5, 5});
  auto out = dc->forward_with_gate(x, torch::tensor({{0.5, 0.5}}, torch::kFloat64));
  EXPECT_LT(out.abs().max().item<double>(), 1e-12);
}

TEST(DynamicConv, GateIsDistributionProperty) {
  torch::manual_seed(3);
  Gen g(3);
  for (int i = 0; i < 10; ++i) {
    const auto k = g.integer(2, 6);
    auto dc = make_dc(3, 4, k);
    auto gate = dc->gate(g.normal({3, 3, 8, 8}));
    EXPECT_GE(gate.min().item<double>(), 0.0);
    EXPECT_LT(max_abs(gate.sum(1), torch::ones({3}, torch::kFloat64)), 1e-6);
  }
}

TEST(DynamicConv, BankShapesAndChannelMismatch) {
  auto dc = make_dc(3, 8, 4);
  EXPECT_EQ(dc->kernel_bank().sizes(), (std::vector<int64_t>{4, 8, 3, 3, 3}));
  EXPECT_THROW(dc->forward(torch::zeros({1, 5, 4, 4}, torch::kFloat64)), ShapeError);
}

TEST(AttentionBlock, SaturatedGatesAreIdentity) {
  AttentionBlock a(8);
  a->to(torch::kFloat64);
  Gen g(4);
  auto x = g.normal({2, 8, 6, 6});
  auto out = a->forward_with_gates(x, torch::ones({2, 8, 1, 1}, torch::kFloat64),
                                   torch::ones({2, 1, 6, 6}, torch::kFloat64));
  EXPECT_TRUE(torch::equal(out, x));
}

TEST(AttentionBlock, ShrinksMagnitudeProperty) {
  torch::manual_seed(5);
  AttentionBlock a(8);
  a->to(torch::kFloat64);
  Gen g(5);
  for (int i = 0; i < 10; ++i) {
    auto x = g.normal({2, 8, 7, 5}) * g.uniform(0.1, 10.0);
    EXPECT_TRUE((a->forward(x).abs() <= x.abs()).all().item<bool>());
  }
  EXPECT_EQ(a->channel_gate(g.normal({2, 8, 7, 5})).size(1), 8);
}

TEST(EstimatePriors, ShapesRangeAndDeterminism) {
  torch::manual_seed(6);
  PPGBranch branch;
  Gen g(6);
  auto img = g.image(12, 10);
  auto p = estimate_priors(img, branch);
  EXPECT_TRUE(p.transmission().same_shape(img));
  EXPECT_TRUE(p.background().same_shape(img));
  EXPECT_GE(p.transmission().tensor().min().item<double>(), physics::kTransmissionFloor);
  EXPECT_LT(p.transmission().tensor().max().item<double>(), 1.0);
  auto q = estimate_priors(img, branch);
  EXPECT_TRUE(torch::equal(p.transmission().tensor(), q.transmission().tensor()));
  EXPECT_TRUE(torch::equal(p.background().tensor(), q.background().tensor()));
}

TEST(EstimatePriors, BackgroundSpatiallyConstant) {
  torch::manual_seed(7);
  PPGBranch branch;
  Gen g(7);
  auto b = estimate_priors(g.image(9, 11), branch).background().tensor();
  EXPECT_EQ(b.flatten(1).var(1, false).max().item<double>(), 0.0);
}

TEST(PPGReconstruct, Examples) {
  Gen g(8);
  auto gt = g.image(4, 4);
  physics::PhysicsPrior unit(ImageGrid::filled(4, 4, 3, 1.0), ImageGrid::filled(4, 4, 3, 0.3));
  EXPECT_TRUE(torch::equal(ppg_reconstruct(gt, unit).tensor(), gt.tensor()));

  physics::PhysicsPrior half(ImageGrid::filled(4, 4, 3, 0.5), ImageGrid::filled(4, 4, 3, 0.4));
  auto out = ppg_reconstruct(ImageGrid::filled(4, 4, 3, 0.6), half).tensor();
  EXPECT_NEAR(out.min().item<double>(), 0.5, 1e-15);
  EXPECT_NEAR(out.max().item<double>(), 0.5, 1e-15);
}

TEST(PPGReconstruct, DelegatesToDegradeProperty) {
  Gen g(9);
  for (int i = 0; i < 50; ++i) {
    const auto h = g.integer(1, 8), w = g.integer(1, 8);
    auto gt = g.image(h, w);
    physics::PhysicsPrior p(ImageGrid(g.tensor({3, h, w}, physics::kTransmissionFloor, 1.0)),
                            ImageGrid(g.tensor({3, h, w}, 0.0, 1.0)));
    EXPECT_TRUE(torch::equal(ppg_reconstruct(gt, p).tensor(), physics::degrade(gt, p).tensor()));
  }
}

TEST(PPGLoss, Examples) {
  RandomPyramidExtractor ex;
  Gen g(10);
  auto a = g.image(16, 16);
  EXPECT_EQ(ppg_loss(a, a, &ex, 1.0, 0.1).total, 0.0);
  auto c1 = ImageGrid::filled(16, 16, 3, 0.5);
  auto c2 = ImageGrid::filled(16, 16, 3, 0.6);
  EXPECT_NEAR(ppg_loss(c1, c2, &ex, 1.0, 0.0).total, 0.1, 1e-12);
  EXPECT_EQ(ppg_loss(a, g.image(16, 16), &ex, 0.0, 0.0).total, 0.0);
}

TEST(PPGLoss, PerceptualExtractorDeterministic) {
  RandomPyramidExtractor a(3), b(3);
  Gen g(11);
  auto x = g.tensor({1, 3, 16, 16}, 0.0, 1.0, torch::kFloat32);
  EXPECT_TRUE(torch::equal(a.features(x), b.features(x)));
}

TEST(PPGLoss, GradientMatchesFiniteDifferences) {
  RandomPyramidExtractor ex;
  Gen g(12);
  auto observed = g.tensor({1, 3, 8, 8}, 0.0, 1.0);
  // Keep every difference well away from the L1 kink.
  auto sign = torch::where(g.tensor({1, 3, 8, 8}, 0.0, 1.0) > 0.5, 1.0, -1.0);
  auto recon = (observed + sign * g.tensor({1, 3, 8, 8}, 0.05, 0.2)).detach().requires_grad_();
  ppg_loss(recon, observed, &ex, 1.0, 0.1).total.backward();
  auto grad = recon.grad().flatten();
  auto flat = recon.detach().clone().flatten();
  const double h = 1e-6;
  for (int i = 0; i < 10; ++i) {
    const auto idx = g.integer(0, flat.numel() - 1);
    auto plus = flat.clone(), minus = flat.clone();
    plus[idx] += h;
    minus[idx] -= h;
    const double fp = ppg_loss(plus.view_as(recon), observed, &ex, 1.0, 0.1).total.item<double>();
    const double fm = ppg_loss(minus.view_as(recon), observed, &ex, 1.0, 0.1).total.item<double>();
    const double numeric = (fp - fm) / (2 * h);
    const double analytic = grad[idx].item<double>();
    EXPECT_LE(std::abs(numeric - analytic), 1e-3 * std::max(std::abs(analytic), 1e-6)) << idx;
  }
}

TEST(PPGBranch, TrainingSmokeReducesReconstructionLoss) {
  torch::manual_seed(13);
  std::vector<torch::Tensor> clean, degraded;
  for (int i = 0; i < 4; ++i) {
    auto c = physics::procedural_scene(24, 24, 40 + i);
    physics::SynthParams p;
    p.seed = 50 + i;
    clean.push_back(c.batched());
    degraded.push_back(physics::synth_pair(c, p).degraded.batched());
  }
  auto gt = torch::cat(clean), obs = torch::cat(degraded);
  PPGBranch branch;
  torch::optim::Adam opt(branch->parameters(), torch::optim::AdamOptions(3e-3));
  auto loss_fn = [&] {
    auto pr = branch->forward(obs);
    auto rec = gt * pr.transmission + (1.0 - pr.transmission) * pr.background;
    return (rec - obs).abs().mean();
  };
  const double initial = loss_fn().item<double>();
  for (int step = 0; step < 600; ++step) {
    opt.zero_grad();
    auto l = loss_fn();
    l.backward();
    opt.step();
  }
  const double final_loss = loss_fn().item<double>();
  EXPECT_LT(final_loss * 10.0, initial) << initial << " -> " << final_loss;
}

TEST(PPGBranch, ScaledBlur) {
  PPGConfig c;
  auto [sigma, k] = scaled_blur(c, 256);
  EXPECT_DOUBLE_EQ(sigma, 5.0);
  EXPECT_EQ(k, 21);
  auto [s2, k2] = scaled_blur(c, 64);
  EXPECT_LT(s2, 5.0);
  EXPECT_EQ(k2 % 2, 1);
}
