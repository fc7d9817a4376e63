#include "padiff/acceptance.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>

#include "padiff/diffusion.hpp"
#include "padiff/metrics.hpp"
#include "padiff/model.hpp"
#include "padiff/nn_util.hpp"
#include "padiff/pdt.hpp"
#include "padiff/physics.hpp"
#include "padiff/synth_data.hpp"
#include "padiff/train.hpp"

namespace padiff::acceptance {

namespace {

namespace fs = std::filesystem;

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), pattern, a, b, c, d);
  return buf;
}

struct Outcome {
  bool pass;
  std::string detail;
};

torch::Tensor uniform(std::vector<int64_t> shape, double lo, double hi, at::Generator& gen) {
  return torch::rand(shape, gen, torch::kFloat64) * (hi - lo) + lo;
}

// 1 ---------------------------------------------------------------------------------------------
Outcome physics_roundtrip() {
  constexpr double kTol = 1e-6;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(101);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t h = 4 + trial % 13;
    const int64_t w = 5 + (trial * 7) % 11;
    ImageGrid clean(uniform({3, h, w}, 0.0, 1.0, gen));
    ImageGrid transmission(uniform({3, h, w}, physics::kTransmissionFloor, 1.0, gen));
    ImageGrid background(uniform({3, 1, 1}, 0.0, 1.0, gen).expand({3, h, w}).contiguous());
    physics::PhysicsPrior prior(transmission, background);
    auto back = physics::recover(physics::degrade(clean, prior), prior);
    worst = std::max(worst, (back.tensor() - clean.tensor()).abs().max().item<double>());
  }
  return {worst < kTol, fmt("max |recover(degrade(J)) - J| = %.3g over 100 trials (tol %.0e)", worst, kTol)};
}

// 2 ---------------------------------------------------------------------------------------------
Outcome schedule_oracle() {
  bool ok = true;
  std::ostringstream detail;
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> start_dist(1e-6, 1e-3);
  std::uniform_real_distribution<double> span_dist(0.0, 5e-2);
  int checked = 0;
  for (int64_t steps : {1, 2, 3, 7, 16, 33, 64}) {
    const double start = start_dist(rng);
    const double end = start + span_dist(rng);
    auto sched = diffusion::make_schedule(steps, start, end);
    double product = 1.0;
    for (int64_t t = 1; t <= steps; ++t) {
      // Oracle betas: plain linear interpolation, compared to within one rounding step.
      const double beta =
          steps == 1 ? start
                     : start + (end - start) * static_cast<double>(t - 1) / static_cast<double>(steps - 1);
      ok = ok && std::abs(sched.beta(t) - beta) <= 4.0 * std::numeric_limits<double>::epsilon() * end;
      product *= 1.0 - sched.beta(t);
      ok = ok && sched.alpha_bar(t) == product;
      ++checked;
    }
  }
  auto standard = diffusion::default_schedule();
  const bool endpoints = standard.num_steps() == 2000 && standard.beta(1) == 1e-6 &&
                         standard.beta(2000) == 1e-2 && standard.alpha_bar(0) == 1.0 &&
                         standard.alpha_bar(1) == 1.0 - 1e-6;
  double product = 1.0;
  bool default_products = true;
  for (int64_t t = 1; t <= 2000; ++t) {
    product *= 1.0 - standard.beta(t);
    default_products = default_products && standard.alpha_bar(t) == product;
  }
  detail << checked << " alpha_bar entries match the loop product exactly: " << (ok ? "yes" : "no")
         << "; default endpoints bit-exact: " << (endpoints ? "yes" : "no")
         << "; T=2000 products exact: " << (default_products ? "yes" : "no");
  return {ok && endpoints && default_products, detail.str()};
}

// 3 ---------------------------------------------------------------------------------------------
Outcome forward_moments() {
  constexpr int64_t kDraws = 10000;
  constexpr double kMeanSigmas = 3.0;
  constexpr double kVarRel = 0.05;
  auto sched = diffusion::default_schedule();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(303);
  auto x0 = torch::tensor({-0.8, -0.1, 0.3, 0.9}, torch::kFloat64).view({1, 1, 2, 2});
  bool ok = true;
  std::ostringstream detail;
  for (int64_t t : {1, 500, 2000}) {
    auto eps = torch::randn({kDraws, 1, 2, 2}, gen, torch::kFloat64);
    auto xt = diffusion::q_sample(x0.expand({kDraws, 1, 2, 2}), t, eps, sched);
    const double abar = sched.alpha_bar(t);
    auto mean = xt.mean(0);
    auto expected = std::sqrt(abar) * x0[0];
    const double se = std::sqrt((1.0 - abar) / kDraws);
    const double z = ((mean - expected).abs().max().item<double>()) / se;
    const double var = (xt - expected).pow(2).mean().item<double>();
    const double rel = std::abs(var / (1.0 - abar) - 1.0);
    ok = ok && z < kMeanSigmas && rel < kVarRel;
    detail << "t=" << t << ": mean dev " << fmt("%.2f", z) << " SE, var rel err " << fmt("%.4f", rel) << "; ";
  }
  return {ok, detail.str()};
}

// 4 ---------------------------------------------------------------------------------------------
Outcome oracle_reverse() {
  // Float64 round-off bound for "returns x0 exactly".
  constexpr double kExact = 1e-12;
  constexpr double kChainTol = 1e-4;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(404);
  double worst_single = 0.0;
  for (double beta : {1e-6, 1e-4, 1e-2, 0.1, 0.5}) {
    auto sched = diffusion::make_schedule(1, beta, beta);
    auto x0 = uniform({2, 3, 8, 8}, -1.0, 1.0, gen);
    auto eps = torch::randn(x0.sizes(), gen, torch::kFloat64);
    auto x1 = diffusion::q_sample(x0, 1, eps, sched);
    auto z = torch::randn(x0.sizes(), gen, torch::kFloat64);
    auto back = diffusion::p_step(x1, 1, eps, sched, z);
    worst_single = std::max(worst_single, (back - x0).abs().max().item<double>());
  }

  auto sched = diffusion::make_schedule(200, 1e-4, 2e-2);
  auto x0 = uniform({1, 3, 8, 8}, -1.0, 1.0, gen);
  // True noise for the current state given the known clean image.
  diffusion::Denoiser oracle = [&](const torch::Tensor& x, const torch::Tensor& t) {
    const double abar = sched.alpha_bar(t[0].item<int64_t>());
    return (x - std::sqrt(abar) * x0) / std::sqrt(1.0 - abar);
  };
  auto x_T = torch::randn(x0.sizes(), gen, torch::kFloat64);
  auto plan = diffusion::make_skip_plan(sched.num_steps(), sched.num_steps());
  diffusion::SamplerOptions opts;
  opts.clip_x0 = false;
  auto ddim = diffusion::skip_sample(oracle, x_T, plan, sched, opts);
  auto ddpm = diffusion::ancestral_sample(oracle, x_T, sched, std::nullopt, false);
  const double chain_gap = (ddim - ddpm).abs().max().item<double>();
  const double to_x0 = (ddim - x0).abs().max().item<double>();
  return {worst_single <= kExact && chain_gap < kChainTol,
          fmt("T=1 chain |x - x0| = %.3g (tol %.0e); full skip plan vs iterated p_step: %.3g "
              "(tol %.0e)",
              worst_single, kExact, chain_gap, kChainTol) +
              fmt("; skip plan ends %.3g from x0", to_x0)};
}

// 5 ---------------------------------------------------------------------------------------------
Outcome ppu_identities() {
  torch::manual_seed(505);
  pdt::PhysicsPerceptionUnit ppu(8, 4, 4);
  ppu->to(torch::kFloat64);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(505);
  auto latent = torch::randn({2, 8, 6, 5}, gen, torch::kFloat64);
  auto light = torch::randn({2, 8, 1, 1}, gen, torch::kFloat64).expand_as(latent);
  auto ones = torch::ones_like(latent);
  auto zeros = torch::zeros_like(latent);
  const bool identity = torch::equal(pdt::PhysicsPerceptionUnitImpl::combine(latent, ones, zeros, light), latent);
  const bool broadcast = torch::equal(pdt::PhysicsPerceptionUnitImpl::combine(latent, zeros, ones, light), light);

  torch::NoGradGuard no_grad;
  double spatial_var = 0.0;
  double perm_gap = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    auto x = torch::randn({1, 8, 7, 6}, gen, torch::kFloat64);
    auto est = ppu->estimate(x);
    spatial_var = std::max(spatial_var, est.background.flatten(2).var(2, false).abs().max().item<double>());
    auto perm = torch::randperm(42, gen, torch::kLong);
    auto shuffled = x.flatten(2).index_select(2, perm).view({1, 8, 7, 6});
    auto est_perm = ppu->estimate(shuffled);
    perm_gap = std::max(perm_gap, (est_perm.background - est.background).abs().max().item<double>());
  }
  constexpr double kPermTol = 1e-12;
  return {identity && broadcast && spatial_var == 0.0 && perm_gap <= kPermTol,
          std::string("t1=1 identity ") + (identity ? "exact" : "broken") + ", t2-only broadcast " +
              (broadcast ? "exact" : "broken") +
              fmt(", B_feat spatial variance %.3g, GAP permutation gap %.3g (tol %.0e, float64)",
                  spatial_var, perm_gap, kPermTol)};
}

// 6 ---------------------------------------------------------------------------------------------
Outcome attention_contracts() {
  constexpr double kRowTol = 1e-6;
  torch::manual_seed(606);
  auto config = pdt::PDTConfig::desk();
  config.image_size = 32;
  pdt::PDTDenoiser denoiser(config);
  denoiser->eval();
  pdt::AttentionProbe probe;
  denoiser->set_attention_probe(&probe);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(606);
  torch::NoGradGuard no_grad;
  pdt::ConditionBundle cond{torch::randn({2, 3, 32, 32}, gen), torch::rand({2, 3, 32, 32}, gen) * 2 - 1,
                            torch::rand({2, 3, 32, 32}, gen) * 0.9 + 0.05};
  denoiser->forward(torch::randn({2, 3, 32, 32}, gen), cond, torch::tensor({5, 1500}, torch::kLong));
  double row_err = 0.0;
  double min_entry = 1.0;
  for (const auto& m : probe.maps) {
    row_err = std::max(row_err, (m.sum(-1) - 1.0).abs().max().item<double>());
    min_entry = std::min(min_entry, m.min().item<double>());
  }
  const size_t n_maps = probe.maps.size();

  pdt::PhysicsAwareSelfAttention pa(16, 64, 4);
  auto features = torch::randn({2, 16, 6, 6}, gen);
  auto cam_out = torch::randn({2, 16, 6, 6}, gen);
  auto t_emb = torch::randn({2, 64}, gen);
  auto [_, attn] = pa->forward_with_attention(features, cam_out, t_emb);
  auto base_argmax = attn.argmax(-1);
  bool argmax_stable = true;
  const double s0 = pa->log_alpha().item<double>();
  for (double k : {0.25, 0.5, 2.0, 8.0}) {
    pa->log_alpha().fill_(s0 + std::log(k));
    argmax_stable = argmax_stable &&
                    torch::equal(pa->forward_with_attention(features, cam_out, t_emb).second.argmax(-1),
                                 base_argmax);
  }
  pa->log_alpha().fill_(s0);
  pa->zero_value_projection();
  const bool residual = torch::equal(pa->forward(features, cam_out, t_emb), features);

  return {n_maps > 0 && row_err <= kRowTol && min_entry >= 0.0 && argmax_stable && residual,
          fmt("%.0f attention maps, max |row sum - 1| = %.3g (tol %.0e), min entry %.3g", double(n_maps),
              row_err, kRowTol, min_entry) +
              "; argmax stable under alpha rescaling: " + (argmax_stable ? "yes" : "no") +
              "; zero-value PA-SA identity exact: " + (residual ? "yes" : "no")};
}

// 7 ---------------------------------------------------------------------------------------------
struct GradCheck {
  double worst = 0.0;
};

// Central differences on `count` randomly chosen scalar parameter entries.
GradCheck grad_check(const std::function<torch::Tensor()>& loss_fn,
                     const std::vector<torch::Tensor>& params, int count, uint64_t seed, double step,
                     double floor) {
  for (const auto& p : params) {
    p.mutable_grad() = torch::Tensor();
  }
  loss_fn().backward();
  std::vector<int64_t> offsets{0};
  for (const auto& p : params) {
    offsets.push_back(offsets.back() + p.numel());
  }
  std::mt19937_64 rng(seed);
  GradCheck out;
  torch::NoGradGuard no_grad;
  for (int i = 0; i < count; ++i) {
    const auto flat_index = static_cast<int64_t>(rng() % static_cast<uint64_t>(offsets.back()));
    size_t k = 0;
    while (offsets[k + 1] <= flat_index) {
      ++k;
    }
    const int64_t j = flat_index - offsets[k];
    auto value = params[k].view({-1});
    const double analytic = params[k].grad().view({-1})[j].item<double>();
    const double original = value[j].item<double>();
    value[j].fill_(original + step);
    const double up = loss_fn().item<double>();
    value[j].fill_(original - step);
    const double down = loss_fn().item<double>();
    value[j].fill_(original);
    const double numeric = (up - down) / (2.0 * step);
    const double rel =
        std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), floor});
    out.worst = std::max(out.worst, rel);
  }
  return out;
}

Outcome gradient_checks() {
  constexpr double kTol64 = 1e-3;
  constexpr double kTol32 = 1e-2;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(707);
  torch::manual_seed(707);
  std::ostringstream detail;
  bool ok = true;

  {
    pdt::GatedMultiScaleFFN ffn(8, 2.66, std::vector<int64_t>{3, 5}, 4, 0.0);
    ffn->to(torch::kFloat64);
    auto x = torch::randn({2, 8, 8, 8}, gen, torch::kFloat64);
    auto w = torch::randn({2, 8, 8, 8}, gen, torch::kFloat64);
    auto r = grad_check([&] { return (ffn->forward(x) * w).sum(); }, ffn->parameters(), 10, 1, 1e-6, 1e-8);
    ok = ok && r.worst < kTol64;
    detail << fmt("GM-FFN f64 %.2e", r.worst);
  }
  {
    auto cfg = pdt::PDTConfig::desk();
    cfg.dropout = 0.0;
    cfg.norm_groups = 4;
    pdt::PDTBlock block(8, 32, cfg, true);
    block->to(torch::kFloat64);
    auto x = torch::randn({2, 8, 8, 8}, gen, torch::kFloat64);
    auto tr = torch::rand({2, 3, 8, 8}, gen, torch::kFloat64);
    auto te = torch::randn({2, 32}, gen, torch::kFloat64);
    auto w = torch::randn({2, 8, 8, 8}, gen, torch::kFloat64);
    auto r = grad_check([&] { return (block->forward(x, tr, te) * w).sum(); }, block->parameters(), 10, 2,
                        1e-6, 1e-8);
    ok = ok && r.worst < kTol64;
    detail << fmt(", PDT block f64 %.2e", r.worst);
  }
  for (auto dtype : {torch::kFloat64, torch::kFloat32}) {
    auto cfg = pdt::PDTConfig::desk();
    cfg.inner_channel = 8;
    cfg.channel_multipliers = {1, 2};
    cfg.norm_groups = 4;
    cfg.image_size = 8;
    cfg.dropout = 0.0;
    torch::manual_seed(708);
    pdt::PDTDenoiser denoiser(cfg);
    denoiser->to(dtype);
    auto sched = diffusion::default_schedule();
    auto x0 = (torch::rand({2, 3, 8, 8}, gen, torch::kFloat64) * 2 - 1).to(dtype);
    auto eps = torch::randn({2, 3, 8, 8}, gen, torch::kFloat64).to(dtype);
    auto t = torch::tensor({300, 1700}, torch::kLong);
    pdt::ConditionBundle cond{(torch::rand({2, 3, 8, 8}, gen, torch::kFloat64) * 2 - 1).to(dtype),
                              (torch::rand({2, 3, 8, 8}, gen, torch::kFloat64) * 2 - 1).to(dtype),
                              (torch::rand({2, 3, 8, 8}, gen, torch::kFloat64) * 0.9 + 0.05).to(dtype)};
    auto x_t = diffusion::q_sample(x0, t, eps, sched);
    const bool f64 = dtype == torch::kFloat64;
    auto r = grad_check(
        [&] { return diffusion::diffusion_loss(eps, denoiser->forward(x_t, cond, t)); },
        denoiser->parameters(), 10, f64 ? 3 : 4, f64 ? 1e-6 : 1e-2, f64 ? 1e-6 : 1e-3);
    ok = ok && r.worst < (f64 ? kTol64 : kTol32);
    detail << fmt(f64 ? ", end-to-end f64 %.2e" : ", end-to-end f32 %.2e", r.worst);
  }
  detail << fmt(" (max rel err; tol %.0e f64, %.0e f32)", kTol64, kTol32);
  return {ok, detail.str()};
}

// 8 ---------------------------------------------------------------------------------------------
train::PairDataset overfit_pairs(int64_t side, int64_t count, uint64_t seed) {
  train::PairDataset data;
  physics::SynthParams params;
  for (int64_t i = 0; i < count; ++i) {
    auto clean = physics::procedural_scene(side, side, seed + static_cast<uint64_t>(i));
    params.seed = data::image_seed(seed, static_cast<uint64_t>(i));
    data.add("pair" + std::to_string(i), physics::synth_pair(clean, params).degraded, clean);
  }
  return data;
}

train::TrainConfig overfit_config() {
  auto c = train::TrainConfig::desk();
  c.crop = 32;
  c.batch = 4;
  c.iterations = 2000;
  c.lr = 1e-3;
  c.seed = 808;
  c.model.pdt.dropout = 0.0;
  c.model.pdt.image_size = 32;
  return c;
}

Outcome overfit_oracle() {
  constexpr double kLossRatio = 10.0;
  constexpr double kPsnrGain = 3.0;
  auto data = overfit_pairs(32, 4, 800);
  train::Trainer trainer(overfit_config());
  auto probe = trainer.make_probe(trainer.make_batch(data, 0), 20, 809);
  const double before = trainer.probe_loss(probe).total;
  double first_step = -1.0;
  train::FitOptions options;
  options.on_step = [&](const train::LogRow& row) {
    if (first_step < 0.0) {
      first_step = row.dm + row.ppg + row.inr;
    }
  };
  train::fit(trainer, data, options);
  const double after = trainer.probe_loss(probe).total;
  double input_psnr = 0.0;
  for (int64_t i = 0; i < data.size(); ++i) {
    input_psnr += metrics::psnr(data.degraded[i], data.clean[i]);
  }
  input_psnr /= static_cast<double>(data.size());
  const double output_psnr = trainer.validate(data);
  const double ratio = before / after;
  return {ratio >= kLossRatio && output_psnr - input_psnr >= kPsnrGain,
          fmt("probe loss %.4f -> %.4f (%.1fx, need %.0fx)", before, after, ratio, kLossRatio) +
              fmt("; first step %.4f; PSNR input %.2f dB -> sampled %.2f dB", first_step, input_psnr,
                  output_psnr) +
              fmt(" (gain %.2f, need %.0f)", output_psnr - input_psnr, kPsnrGain)};
}

// 9 ---------------------------------------------------------------------------------------------
std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.is_regular_file()) {
      fa.push_back(fs::relative(e.path(), a));
    }
  }
  for (const auto& e : fs::recursive_directory_iterator(b)) {
    if (e.is_regular_file()) {
      fb.push_back(fs::relative(e.path(), b));
    }
  }
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb || fa.empty()) {
    return false;
  }
  for (const auto& f : fa) {
    if (read_file(a / f) != read_file(b / f)) {
      return false;
    }
  }
  return true;
}

bool same_params(train::Trainer& a, train::Trainer& b) {
  auto pa = a.model()->parameters();
  auto pb = b.model()->parameters();
  if (pa.size() != pb.size()) {
    return false;
  }
  for (size_t i = 0; i < pa.size(); ++i) {
    if (!torch::equal(pa[i], pb[i])) {
      return false;
    }
  }
  return true;
}

Outcome determinism(const fs::path& work) {
  std::vector<std::string> names;
  std::vector<ImageGrid> scenes;
  for (int i = 0; i < 3; ++i) {
    names.push_back("scene" + std::to_string(i));
    scenes.push_back(physics::procedural_scene(40, 48, 900 + i));
  }
  data::SynthDatasetOptions opts;
  opts.seed = 7;
  opts.resolution = 32;
  fs::remove_all(work / "synth_a");
  fs::remove_all(work / "synth_b");
  data::write_synth_dataset(names, scenes, work / "synth_a", opts);
  data::write_synth_dataset(names, scenes, work / "synth_b", opts);
  const bool synth_same = same_tree(work / "synth_a", work / "synth_b");

  auto dataset = train::PairDataset::load((work / "synth_a").string());
  auto cfg = train::TrainConfig::desk();
  cfg.crop = 32;
  cfg.batch = 2;
  cfg.iterations = 10;
  cfg.seed = 909;
  cfg.model.pdt.image_size = 32;

  auto run = [&](train::Trainer& tr, int64_t steps) {
    std::vector<train::StepLosses> out;
    for (int64_t i = 0; i < steps; ++i) {
      out.push_back(tr.train_step(tr.make_batch(dataset, tr.iteration())));
    }
    return out;
  };
  auto same_losses = [](const std::vector<train::StepLosses>& a, const std::vector<train::StepLosses>& b) {
    if (a.size() != b.size()) {
      return false;
    }
    for (size_t i = 0; i < a.size(); ++i) {
      if (a[i].dm != b[i].dm || a[i].ppg != b[i].ppg || a[i].inr != b[i].inr) {
        return false;
      }
    }
    return true;
  };
  train::Trainer first(cfg);
  train::Trainer second(cfg);
  auto traj_a = run(first, 10);
  auto traj_b = run(second, 10);
  const bool trajectories = same_losses(traj_a, traj_b) && same_params(first, second);

  auto input = dataset.degraded[0].batched(torch::kFloat32);
  auto g1 = at::make_generator<at::CPUGeneratorImpl>(11);
  auto g2 = at::make_generator<at::CPUGeneratorImpl>(11);
  const bool samples = torch::equal(first.model()->enhance(input, first.schedule(), first.skip_plan(), g1),
                                    second.model()->enhance(input, second.schedule(), second.skip_plan(), g2));

  train::Trainer resumed_src(cfg);
  auto head = run(resumed_src, 5);
  const auto ckpt = (work / "resume.ckpt").string();
  resumed_src.save(ckpt);
  auto resumed = train::Trainer::load(ckpt);
  auto tail = run(*resumed, 5);
  head.insert(head.end(), tail.begin(), tail.end());
  const bool resume = same_losses(head, traj_a) && same_params(*resumed, first);

  return {synth_same && trajectories && samples && resume,
          std::string("synth datasets byte-identical: ") + (synth_same ? "yes" : "no") +
              "; 10-step trajectories identical: " + (trajectories ? "yes" : "no") +
              "; sampled images identical: " + (samples ? "yes" : "no") +
              "; resume 5+5 equals uninterrupted 10: " + (resume ? "yes" : "no")};
}

// 10 --------------------------------------------------------------------------------------------
ImageGrid two_colour_card(double spread) {
  auto img = torch::full({3, 16, 16}, 0.5, torch::kFloat64);
  auto right = img.narrow(2, 8, 8);
  right[0].fill_(0.5 + spread);
  right[2].fill_(0.5 - spread);
  return ImageGrid(img);
}

Outcome metric_cases() {
  constexpr double kPsnrTol = 1e-9;
  constexpr double kFlipTol = 1e-9;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(1010);
  ImageGrid a(torch::full({3, 16, 16}, 0.5, torch::kFloat64));
  ImageGrid b(torch::full({3, 16, 16}, 0.6, torch::kFloat64));
  const double p = metrics::psnr(a, b);
  ImageGrid x(torch::rand({3, 32, 32}, gen, torch::kFloat64));
  const double s = metrics::ssim(x, x);

  auto scene = physics::procedural_scene(48, 40, 1011);
  ImageGrid flipped(scene.tensor().flip({2}).contiguous());
  const double uciqe_gap = std::abs(metrics::uciqe(scene) - metrics::uciqe(flipped));
  const double uiqm_gap = std::abs(metrics::uiqm(scene) - metrics::uiqm(flipped));

  bool uciqe_monotone = true;
  double prev = -1.0;
  for (double spread : {0.05, 0.15, 0.25, 0.35, 0.45}) {
    const double u = metrics::uciqe(two_colour_card(spread));
    uciqe_monotone = uciqe_monotone && u > prev;
    prev = u;
  }

  auto blurred = physics::gaussian_blur(physics::procedural_scene(48, 48, 1012), 2.0, 9);
  auto sharp_t = blurred.tensor().clone();
  for (int k = 0; k < 4; ++k) {
    sharp_t.narrow(1, 4 + 11 * k, 5).narrow(2, 6 + 9 * k, 6).fill_(k % 2 ? 0.95 : 0.05);
  }
  ImageGrid sharp(sharp_t);
  const double uism_blur = metrics::uiqm_terms(blurred).sharpness;
  const double uism_sharp = metrics::uiqm_terms(sharp).sharpness;

  const bool ok = std::abs(p - 20.0) <= kPsnrTol && s == 1.0 && uciqe_gap <= kFlipTol &&
                  uiqm_gap <= kFlipTol && uciqe_monotone && uism_sharp > uism_blur;
  return {ok, fmt("PSNR 0.1 offset = %.12f dB; SSIM(x,x) = %.17g", p, s) +
                  fmt("; flip gaps UCIQE %.2g UIQM %.2g", uciqe_gap, uiqm_gap) +
                  "; UCIQE rises with chroma spread: " + (uciqe_monotone ? "yes" : "no") +
                  fmt("; UISM blurred %.3f -> with edges %.3f", uism_blur, uism_sharp)};
}

// 11 --------------------------------------------------------------------------------------------
Outcome capacity() {
  constexpr double kBand = 0.10;
  model::PADiff m(model::ModelConfig::full());
  const auto counts = m->parameter_counts();
  auto within = [&](int64_t n, double target) {
    return std::abs(static_cast<double>(n) - target) <= kBand * target;
  };
  const bool ok = within(counts.pdt, 41.31e6) && within(counts.ppg, 0.0302e6) &&
                  within(counts.inr, 0.1487e6) && within(counts.total(), 41.76e6);
  return {ok, fmt("PDT %.4fM (41.31), PPG %.4fM (0.0302), INR %.4fM (0.1487)", counts.pdt / 1e6,
                  counts.ppg / 1e6, counts.inr / 1e6) +
                  fmt(", total %.4fM (41.76), band +-%.0f%%", counts.total() / 1e6, kBand * 100)};
}

const char* title(int id) {
  switch (id) {
    case 1: return "physics roundtrip";
    case 2: return "schedule oracle";
    case 3: return "forward-process moments";
    case 4: return "oracle reverse";
    case 5: return "PPU identities";
    case 6: return "attention contracts";
    case 7: return "gradient checks";
    case 8: return "overfit oracle";
    case 9: return "determinism";
    case 10: return "metrics";
    case 11: return "capacity sanity";
    default: return "unknown";
  }
}

}  // namespace

Result run_criterion(int id, const Options& options) {
  Result r;
  r.id = id;
  r.title = title(id);
  const auto start = std::chrono::steady_clock::now();
  try {
    fs::create_directories(options.work_dir);
    Outcome o{false, "unknown criterion"};
    switch (id) {
      case 1: o = physics_roundtrip(); break;
      case 2: o = schedule_oracle(); break;
      case 3: o = forward_moments(); break;
      case 4: o = oracle_reverse(); break;
      case 5: o = ppu_identities(); break;
      case 6: o = attention_contracts(); break;
      case 7: o = gradient_checks(); break;
      case 8: o = overfit_oracle(); break;
      case 9: o = determinism(options.work_dir); break;
      case 10: o = metric_cases(); break;
      case 11: o = capacity(); break;
      default: break;
    }
    r.pass = o.pass;
    r.detail = o.detail;
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  // Runtime budgets; a criterion that blows its budget fails.
  const double budget = id == 1 ? 5.0 : id == 3 ? 30.0 : id == 7 ? 120.0 : id == 8 ? 2400.0 : 600.0;
  if (r.seconds > budget) {
    r.pass = false;
    r.detail += fmt(" [over the %.0f s budget]", budget);
  }
  return r;
}

std::vector<Result> run_all(const Options& options, std::ostream& out) {
  std::vector<int> ids = options.only;
  if (ids.empty()) {
    for (int i = 1; i <= kCriteria; ++i) {
      ids.push_back(i);
    }
  }
  std::vector<Result> results;
  for (int id : ids) {
    results.push_back(run_criterion(id, options));
    out << format(results.back()) << std::endl;
  }
  return results;
}

std::string format(const Result& r) {
  char secs[32];
  std::snprintf(secs, sizeof(secs), "%.1fs", r.seconds);
  return "ACCEPTANCE " + std::to_string(r.id) + " " + (r.pass ? "PASS" : "FAIL") + " " + r.title +
         " | " + r.detail + " | " + secs;
}

}  // namespace padiff::acceptance
