#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "padiff/diffusion.hpp"
#include "padiff/error.hpp"
#include "support.hpp"

using namespace padiff;
using namespace padiff::diffusion;
using padiff::testing::Gen;
using padiff::testing::max_abs;

TEST(Schedule, TwoStepHandValues) {
  auto s = make_schedule(2, 0.1, 0.2);
  EXPECT_DOUBLE_EQ(s.beta(1), 0.1);
  EXPECT_DOUBLE_EQ(s.beta(2), 0.2);
  EXPECT_NEAR(s.alpha_bar(1), 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar(2), 0.72, 1e-15);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedule, SingleStep) {
  auto s = make_schedule(1, 0.3, 0.3);
  EXPECT_NEAR(s.alpha_bar(1), 0.7, 1e-15);
  EXPECT_EQ(s.posterior_variance(1), 0.0);
}

TEST(Schedule, DefaultEndpoints) {
  auto s = default_schedule();
  EXPECT_EQ(s.num_steps(), 2000);
  EXPECT_EQ(s.beta(1), 1e-6);
  EXPECT_EQ(s.beta(2000), 1e-2);
}

TEST(Schedule, InvalidRangesRejected) {
  EXPECT_THROW(make_schedule(0, 0.1, 0.2), DomainError);
  EXPECT_THROW(make_schedule(10, 0.0, 0.2), DomainError);
  EXPECT_THROW(make_schedule(10, 0.3, 0.2), DomainError);
  EXPECT_THROW(make_schedule(10, 0.1, 1.0), DomainError);
  auto s = make_schedule(10, 0.1, 0.2);
  EXPECT_THROW(s.check_timestep(0), DomainError);
  EXPECT_THROW(s.check_timestep(11), DomainError);
}

TEST(Schedule, InvariantsAgainstLoopOracleProperty) {
  Gen g(1);
  for (int i = 0; i < 40; ++i) {
    const auto n = g.integer(1, 64);
    const double lo = g.uniform(1e-6, 0.1);
    const double hi = g.uniform(lo, 0.5);
    auto s = make_schedule(n, lo, hi);
    double prod = 1.0;
    for (int64_t t = 1; t <= n; ++t) {
      const double prev = prod;
      prod *= 1.0 - s.beta(t);
      EXPECT_EQ(s.alpha_bar(t), prod);
      EXPECT_GT(s.beta(t), 0.0);
      if (t > 1) {
        EXPECT_GE(s.beta(t), s.beta(t - 1));
        EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
      }
      EXPECT_NEAR(s.posterior_variance(t), (1.0 - prev) / (1.0 - prod) * s.beta(t), 1e-15);
    }
  }
}

TEST(SkipPlan, UniformPlanShape) {
  auto p = make_skip_plan(2000, 10);
  ASSERT_EQ(p.size(), 10);
  EXPECT_EQ(p.steps().front(), 2000);
  EXPECT_EQ(p.steps().back(), 1);
  for (int64_t i = 1; i < p.size(); ++i) EXPECT_LT(p.steps()[i], p.steps()[i - 1]);
  auto s = default_schedule();
  auto q = make_skip_plan(2000, 10, SkipSpacing::kUniformAlphaBar, &s);
  EXPECT_EQ(q.steps().back(), 1);
  for (int64_t i = 1; i < q.size(); ++i) EXPECT_LT(q.steps()[i], q.steps()[i - 1]);
}

TEST(SkipPlan, RejectsInvalid) {
  EXPECT_THROW(SkipPlan(std::vector<int64_t>{}), DomainError);
  EXPECT_THROW(SkipPlan({5, 5, 1}), DomainError);
  EXPECT_THROW(SkipPlan({5, 3}), DomainError);
}

TEST(QSample, NoiselessAndDegenerate) {
  Gen g(2);
  auto s = make_schedule(50, 1e-3, 2e-2);
  auto x0 = g.tensor({2, 3, 4, 4}, -1.0, 1.0);
  auto zero = torch::zeros_like(x0);
  EXPECT_LT(max_abs(q_sample(x0, 17, zero, s), std::sqrt(s.alpha_bar(17)) * x0), 1e-15);
  auto tiny = make_schedule(1, 1e-300, 1e-300);
  EXPECT_TRUE(torch::equal(q_sample(x0, 1, g.normal({2, 3, 4, 4}), tiny), x0));
  EXPECT_THROW(q_sample(x0, 51, zero, s), DomainError);
}

TEST(QSample, PerSampleTimesteps) {
  Gen g(3);
  auto s = make_schedule(20, 1e-3, 5e-2);
  auto x0 = g.tensor({2, 3, 4, 4}, -1.0, 1.0);
  auto eps = g.normal({2, 3, 4, 4});
  auto both = q_sample(x0, torch::tensor({3, 15}, torch::kLong), eps, s);
  EXPECT_TRUE(torch::equal(both[0], q_sample(x0, 3, eps, s)[0]));
  EXPECT_TRUE(torch::equal(both[1], q_sample(x0, 15, eps, s)[1]));
}

TEST(QSample, MonteCarloMoments) {
  auto s = default_schedule();
  Gen g(4);
  auto x0 = torch::full({10000}, 0.6, torch::kFloat64);
  for (int64_t t : {1, 500, 2000}) {
    auto xt = q_sample(x0, t, g.normal({10000}), s);
    const double ab = s.alpha_bar(t);
    const double se = std::sqrt((1.0 - ab) / 10000.0);
    EXPECT_LE(std::abs(xt.mean().item<double>() - std::sqrt(ab) * 0.6), 3.0 * se) << t;
    EXPECT_LE(std::abs(xt.var().item<double>() / (1.0 - ab) - 1.0), 0.05) << t;
  }
}

TEST(PStep, OracleRecoversCleanAtSingleStep) {
  Gen g(5);
  for (double b : {1e-4, 0.1, 0.5}) {
    auto s = make_schedule(1, b, b);
    auto x0 = g.tensor({1, 3, 8, 8}, -1.0, 1.0);
    auto eps = g.normal({1, 3, 8, 8});
    auto x1 = q_sample(x0, 1, eps, s);
    EXPECT_LT(max_abs(p_step(x1, 1, eps, s, g.normal({1, 3, 8, 8})), x0), 1e-12) << b;
  }
}

TEST(PStep, PosteriorMeanWithZeroNoise) {
  Gen g(6);
  auto s = make_schedule(30, 1e-3, 3e-2);
  const int64_t t = 12;
  auto x0 = g.tensor({1, 3, 5, 5}, -1.0, 1.0);
  auto eps = g.normal({1, 3, 5, 5});
  auto xt = q_sample(x0, t, eps, s);
  const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1), beta = s.beta(t);
  auto mean = std::sqrt(ab_prev) * beta / (1.0 - ab) * x0 +
              std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab) * xt;
  EXPECT_LT(max_abs(p_step(xt, t, eps, s), mean), 1e-12);
}

TEST(PStep, SmallBetaLimit) {
  Gen g(7);
  auto s = make_schedule(3, 1e-8, 1e-8);
  auto xt = g.normal({1, 3, 4, 4});
  EXPECT_LT(max_abs(p_step(xt, 2, torch::zeros_like(xt), s), xt), 1e-7);
}

TEST(PStep, FinalStepIgnoresNoise) {
  Gen g(8);
  auto s = make_schedule(10, 1e-3, 1e-2);
  auto xt = g.normal({1, 3, 4, 4});
  auto eps = g.normal({1, 3, 4, 4});
  EXPECT_TRUE(torch::equal(p_step(xt, 1, eps, s, g.normal({1, 3, 4, 4})), p_step(xt, 1, eps, s)));
}

TEST(SkipSample, FullPlanMatchesAncestralChainWithOracle) {
  Gen g(9);
  auto s = make_schedule(200, 1e-4, 2e-2);
  auto x0 = g.tensor({1, 3, 8, 8}, -0.9, 0.9);
  Denoiser oracle = [&](const torch::Tensor& x, const torch::Tensor& t) {
    const double ab = s.alpha_bar(t[0].item<int64_t>());
    return (x - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
  };
  auto x_T = g.normal({1, 3, 8, 8});
  std::vector<int64_t> all;
  for (int64_t t = 200; t >= 1; --t) all.push_back(t);
  auto ddim = skip_sample(oracle, x_T, SkipPlan(all), s);
  auto chain = ancestral_sample(oracle, x_T, s, std::nullopt, false);
  EXPECT_LT(max_abs(ddim, chain), 1e-4);
  EXPECT_LT(max_abs(ddim, x0), 1e-4);
}

TEST(SkipSample, SeededDeterminismAndRuntime) {
  auto s = default_schedule();
  auto plan = make_skip_plan(2000, 10);
  auto conv = torch::nn::Conv2d(torch::nn::Conv2dOptions(3, 3, 3).padding(1));
  Denoiser tiny = [&](const torch::Tensor& x, const torch::Tensor&) { return conv(x); };
  torch::NoGradGuard ng;
  auto run = [&](uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    auto x_T = torch::randn({1, 3, 64, 64}, gen);
    SamplerOptions o;
    o.eta = 0.5;
    return skip_sample(tiny, x_T, plan, s, o, gen);
  };
  auto start = std::chrono::steady_clock::now();
  auto a = run(11);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_TRUE(torch::equal(a, run(11)));
  EXPECT_FALSE(torch::equal(a, run(12)));
  EXPECT_LT(seconds, 1.0);
}

TEST(DiffusionLoss, Examples) {
  Gen g(10);
  auto e = g.normal({2, 3, 4, 4});
  EXPECT_EQ(diffusion_loss(e, e).item<double>(), 0.0);
  EXPECT_EQ(diffusion_loss(torch::ones({2, 2}), torch::zeros({2, 2})).item<double>(), 1.0);
  EXPECT_EQ(diffusion_loss(torch::ones({2, 2}) * 2, torch::zeros({2, 2}), LossNorm::kL2).item<double>(), 4.0);
  for (int i = 0; i < 20; ++i) {
    EXPECT_GE(diffusion_loss(g.normal({3, 3}), g.normal({3, 3})).item<double>(), 0.0);
  }
  EXPECT_THROW(diffusion_loss(torch::ones({2}), torch::ones({3})), ShapeError);
}

TEST(ScheduleRecord, TextRoundTrip) {
  ScheduleRecord r;
  r.plan = make_skip_plan(2000, 10).steps();
  auto back = ScheduleRecord::from_text(r.to_text());
  EXPECT_EQ(back.num_steps, r.num_steps);
  EXPECT_EQ(back.beta_start, r.beta_start);
  EXPECT_EQ(back.beta_end, r.beta_end);
  EXPECT_EQ(back.plan, r.plan);
  EXPECT_EQ(back.to_text(), r.to_text());
  EXPECT_THROW(ScheduleRecord::from_text("garbage"), FormatError);
}
