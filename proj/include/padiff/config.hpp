#pragma once

#include <cstdint>
#include <string>

#include "padiff/diffusion.hpp"
#include "padiff/model.hpp"

namespace padiff::train {

enum class ConditionGradients {
  kDetached,  ///< L_dm updates only the denoiser
  kShared,    ///< L_dm also back-propagates into the PPG and INR branches
};

/// Everything a training run needs. Serialized as flat `key = value` text; see keys().
struct TrainConfig {
  std::string profile = "desk";
  double lr = 1e-4;
  int64_t batch = 4;
  int64_t crop = 64;
  int64_t iterations = 5000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double w_dm = 1.0;
  double w_ppg = 1.0;
  double w_inr = 1.0;
  uint64_t seed = 0;

  int64_t diffusion_steps = 2000;
  double beta_start = 1e-6;
  double beta_end = 1e-2;
  int64_t skip_steps = 10;
  diffusion::LossNorm loss_norm = diffusion::LossNorm::kL1;

  double lambda1 = 1.0;
  double lambda2 = 0.1;
  /// TorchScript perceptual trunk; empty selects the built-in random pyramid.
  std::string perceptual_model;

  /// Global gradient-norm limit; 0 disables clipping.
  double grad_clip = 0.0;
  /// Two-phase mode: the first N iterations train PPG alone, after which it is frozen.
  int64_t ppg_pretrain_iterations = 0;
  ConditionGradients condition_gradients = ConditionGradients::kDetached;

  int64_t validate_every = 0;
  int64_t checkpoint_every = 0;

  model::ModelConfig model = model::ModelConfig::desk();

  /// Throws DomainError when a setting is out of range.
  void validate() const;

  diffusion::DiffusionSchedule schedule() const;
  diffusion::SkipPlan skip_plan() const;

  /// 64 x 64 crops, batch 4, 5000 iterations, desk-size networks.
  static TrainConfig desk();
  /// 256 x 256 crops, batch 6, full network sizes.
  static TrainConfig full();
  static TrainConfig from_profile(const std::string& name);

  /// Parses `key = value` lines; '#' starts a comment. A `profile` key is applied first,
  /// the remaining keys override it. Unknown keys and malformed values throw FormatError.
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::string& path);
  /// Canonical text; parse(to_text()) reproduces the config exactly.
  std::string to_text() const;
};

}  // namespace padiff::train
