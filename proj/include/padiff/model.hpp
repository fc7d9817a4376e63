#pragma once

#include <cstdint>

#include <torch/torch.h>

#include "padiff/diffusion.hpp"
#include "padiff/inr.hpp"
#include "padiff/pdt.hpp"
#include "padiff/ppg.hpp"

// The three branches wired together: priors and INR output condition the denoiser.
namespace padiff::model {

struct ModelConfig {
  ppg::PPGConfig ppg;
  inr::INRConfig inr;
  pdt::PDTConfig pdt;

  static ModelConfig desk();
  static ModelConfig full();
};

struct ParameterCounts {
  int64_t ppg = 0;
  int64_t inr = 0;
  int64_t pdt = 0;
  int64_t total() const { return ppg + inr + pdt; }
};

struct Conditioning {
  ppg::PriorTensors priors;  ///< physical space
  torch::Tensor inr_output;  ///< [B, 3, H, W], diffusion space
  pdt::ConditionBundle bundle;
};

class PADiffImpl : public torch::nn::Module {
 public:
  explicit PADiffImpl(const ModelConfig& config = ModelConfig::desk());

  /// degraded: [B, 3, H, W] in [0, 1]. With `detach` the bundle carries no gradient back
  /// into the PPG and INR branches.
  Conditioning condition(const torch::Tensor& degraded, bool detach);

  torch::Tensor denoise(const torch::Tensor& x_t, const pdt::ConditionBundle& cond,
                        const torch::Tensor& t);

  /// Skip-sampled enhancement in inference mode. Inputs whose sides are not multiples of the
  /// denoiser's downsampling factor are edge-padded and cropped back. Returns [0, 1] images.
  torch::Tensor enhance(const torch::Tensor& degraded, const diffusion::DiffusionSchedule& schedule,
                        const diffusion::SkipPlan& plan, at::Generator generator,
                        const diffusion::SamplerOptions& options = {});

  /// Side-length multiple the denoiser requires.
  int64_t size_multiple() const;

  ParameterCounts parameter_counts() const;
  const ModelConfig& config() const { return config_; }

  ppg::PPGBranch& ppg() { return ppg_; }
  inr::INRBranch& inr() { return inr_; }
  pdt::PDTDenoiser& pdt() { return pdt_; }

 private:
  ModelConfig config_;
  ppg::PPGBranch ppg_{nullptr};
  inr::INRBranch inr_{nullptr};
  pdt::PDTDenoiser pdt_{nullptr};
};
TORCH_MODULE(PADiff);

}  // namespace padiff::model
