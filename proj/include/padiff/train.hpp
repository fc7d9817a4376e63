#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "padiff/config.hpp"
#include "padiff/image_grid.hpp"
#include "padiff/model.hpp"

namespace padiff::train {

/// Aligned (degraded, clean) pairs in physical range.
struct PairDataset {
  std::vector<std::string> names;
  std::vector<ImageGrid> degraded;
  std::vector<ImageGrid> clean;

  int64_t size() const { return static_cast<int64_t>(degraded.size()); }
  void add(std::string name, ImageGrid degraded_image, ImageGrid clean_image);
  /// Reads `dir/degraded/*.png` and the same file names from `dir/clean/`.
  static PairDataset load(const std::string& dir);
};

/// [B, 3, H, W] float32 tensors in [0, 1].
struct Batch {
  torch::Tensor degraded;
  torch::Tensor clean;
};

struct StepLosses {
  double dm = 0.0;
  double ppg = 0.0;
  double inr = 0.0;
  double total = 0.0;  ///< weighted sum actually optimized
};

/// Fixed evaluation points for measuring the training objective without sampling noise.
struct LossProbe {
  Batch batch;
  std::vector<int64_t> timesteps;  ///< each probe evaluates every sample at every timestep
  std::vector<torch::Tensor> noise;
};

class Checkpoint;

/// Owns the model, optimizer and random state of one training run.
class Trainer {
 public:
  explicit Trainer(TrainConfig config);

  /// One Adam step on w_dm L_dm + w_ppg L_ppg + w_inr L_inr with a uniform timestep per sample.
  StepLosses train_step(const Batch& batch);

  /// Deterministic batch for `iteration`: per-epoch seeded shuffle plus seeded random crops.
  Batch make_batch(const PairDataset& data, int64_t iteration) const;

  /// Mean PSNR of skip-sampled outputs against the clean images, seeded by the iteration.
  double validate(const PairDataset& data);

  /// Loss components at fixed timesteps and noise, evaluated in inference mode.
  StepLosses probe_loss(const LossProbe& probe);
  LossProbe make_probe(const Batch& batch, int64_t timesteps, uint64_t seed) const;

  void save(const std::string& path) const;
  /// Refuses files with another format version or any structural inconsistency.
  static std::unique_ptr<Trainer> load(const std::string& path);

  const TrainConfig& config() const { return config_; }
  int64_t iteration() const { return iteration_; }
  bool ppg_frozen() const { return ppg_frozen_; }
  model::PADiff& model() { return model_; }
  torch::optim::Adam& optimizer() { return *optimizer_; }
  at::Generator& generator() { return generator_; }
  const diffusion::DiffusionSchedule& schedule() const { return schedule_; }
  const diffusion::SkipPlan& skip_plan() const { return plan_; }

  /// Gradient norm before clipping at the most recent step (0 before any step).
  double last_grad_norm() const { return last_grad_norm_; }

 private:
  friend class Checkpoint;
  void freeze_ppg();
  StepLosses compute_losses(const Batch& batch, const torch::Tensor& t, const torch::Tensor& eps,
                            bool ppg_only, torch::Tensor* objective);

  TrainConfig config_;
  diffusion::DiffusionSchedule schedule_;
  diffusion::SkipPlan plan_;
  model::PADiff model_{nullptr};
  std::unique_ptr<torch::optim::Adam> optimizer_;
  std::unique_ptr<ppg::PerceptualExtractor> extractor_;
  at::Generator generator_;
  int64_t iteration_ = 0;
  bool ppg_frozen_ = false;
  double last_grad_norm_ = 0.0;
};

struct LogRow {
  int64_t iteration = 0;
  double dm = 0.0;
  double ppg = 0.0;
  double inr = 0.0;
  std::optional<double> val_psnr;
};

struct FitOptions {
  /// Append-only CSV (iteration,L_dm,L_ppg,L_inr,val_psnr); empty disables.
  std::string log_path;
  /// Written every checkpoint_every iterations and at the end; empty disables.
  std::string checkpoint_path;
  const PairDataset* validation = nullptr;
  /// Stop after this iteration count instead of config.iterations when set.
  std::optional<int64_t> stop_at;
  std::function<void(const LogRow&)> on_step;
};

/// Trains from the trainer's current iteration to config.iterations (or stop_at).
std::vector<LogRow> fit(Trainer& trainer, const PairDataset& data, const FitOptions& options = {});

}  // namespace padiff::train
