#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "padiff/image_grid.hpp"

// DDPM machinery that is independent of the denoiser.
//
// Timesteps are 1-indexed at this API (t = 1 .. T, matching the usual DDPM notation);
// arrays are stored 0-indexed, so step t lives at index t - 1. alpha_bar(0) is defined as 1.
namespace padiff::diffusion {

class DiffusionSchedule {
 public:
  /// Linear betas from beta_start to beta_end inclusive. Requires 0 < start <= end < 1, T >= 1.
  DiffusionSchedule(int64_t num_steps, double beta_start, double beta_end);

  int64_t num_steps() const { return static_cast<int64_t>(betas_.size()); }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int64_t t) const;
  double alpha(int64_t t) const;
  /// Valid for t = 0 .. T; alpha_bar(0) == 1.
  double alpha_bar(int64_t t) const;
  /// (1 - abar_{t-1}) / (1 - abar_t) * beta_t
  double posterior_variance(int64_t t) const;

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }
  const std::vector<double>& posterior_variances() const { return posterior_vars_; }

  void check_timestep(int64_t t) const;

 private:
  double beta_start_;
  double beta_end_;
  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  std::vector<double> posterior_vars_;
};

DiffusionSchedule make_schedule(int64_t num_steps, double beta_start, double beta_end);

/// Default schedule: 2000 steps, linear betas 1e-6 .. 1e-2.
DiffusionSchedule default_schedule();

enum class SkipSpacing { kUniformTimestep, kUniformAlphaBar };

/// Descending timestep subsequence ending at t = 1.
class SkipPlan {
 public:
  explicit SkipPlan(std::vector<int64_t> steps);
  const std::vector<int64_t>& steps() const { return steps_; }
  int64_t size() const { return static_cast<int64_t>(steps_.size()); }

 private:
  std::vector<int64_t> steps_;
};

/// S steps spread over 1..T (both ends included when S >= 2).
SkipPlan make_skip_plan(int64_t num_steps, int64_t plan_length,
                        SkipSpacing spacing = SkipSpacing::kUniformTimestep,
                        const DiffusionSchedule* schedule = nullptr);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. `t` is either a scalar step or a [B]
/// tensor of per-sample steps.
torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                       const DiffusionSchedule& schedule);
torch::Tensor q_sample(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps,
                       const DiffusionSchedule& schedule);
ImageGrid q_sample(const ImageGrid& x0, int64_t t, const ImageGrid& eps,
                   const DiffusionSchedule& schedule);

/// One ancestral step: mu = (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t),
/// x_{t-1} = mu + sigma_t z. z is ignored (treated as zero) at t = 1 or when undefined.
torch::Tensor p_step(const torch::Tensor& x_t, int64_t t, const torch::Tensor& eps_hat,
                     const DiffusionSchedule& schedule, const torch::Tensor& z = {});
ImageGrid p_step(const ImageGrid& x_t, int64_t t, const ImageGrid& eps_hat,
                 const DiffusionSchedule& schedule, const std::optional<ImageGrid>& z = {});

/// eps_hat = denoiser(x_t, t) where t is a [B] int64 tensor of 1-indexed steps.
using Denoiser = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&)>;

struct SamplerOptions {
  /// 0 gives the deterministic DDIM update.
  double eta = 0.0;
  /// Clamp the intermediate x0 estimate into [-1, 1].
  bool clip_x0 = true;
};

/// DDIM-style sampling along `plan`. The generator is only consumed when eta > 0.
torch::Tensor skip_sample(const Denoiser& denoiser, const torch::Tensor& x_T, const SkipPlan& plan,
                          const DiffusionSchedule& schedule, const SamplerOptions& options = {},
                          std::optional<at::Generator> generator = std::nullopt);

/// Full ancestral chain T .. 1 with p_step; reference sampler.
torch::Tensor ancestral_sample(const Denoiser& denoiser, const torch::Tensor& x_T,
                               const DiffusionSchedule& schedule,
                               std::optional<at::Generator> generator = std::nullopt,
                               bool inject_noise = true);

enum class LossNorm { kL1, kL2 };

/// Mean absolute (default) or mean squared error between true and predicted noise.
torch::Tensor diffusion_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat,
                             LossNorm norm = LossNorm::kL1);
double diffusion_loss(const ImageGrid& eps, const ImageGrid& eps_hat, LossNorm norm = LossNorm::kL1);

/// Versioned text record embedded in checkpoints so the sampler can be rebuilt exactly.
struct ScheduleRecord {
  static constexpr int kVersion = 1;
  int64_t num_steps = 2000;
  double beta_start = 1e-6;
  double beta_end = 1e-2;
  std::vector<int64_t> plan;

  std::string to_text() const;
  static ScheduleRecord from_text(const std::string& text);
  DiffusionSchedule schedule() const { return DiffusionSchedule(num_steps, beta_start, beta_end); }
  SkipPlan skip_plan() const { return SkipPlan(plan); }
};

}  // namespace padiff::diffusion
