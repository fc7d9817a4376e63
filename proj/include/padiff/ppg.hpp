#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include <torch/script.h>
#include <torch/torch.h>

#include "padiff/image_grid.hpp"
#include "padiff/physics.hpp"

// Physics prior generation: transmission and background-light sub-networks.
namespace padiff::ppg {

struct DynamicConvOptions {
  int64_t in_channels = 3;
  int64_t out_channels = 16;
  int64_t kernel_size = 3;
  int64_t num_kernels = 4;
};

/// Convolution whose kernel is a per-sample softmax-weighted mixture of K parallel kernels.
/// The gate is a small head: global average pool -> linear -> ReLU -> linear -> softmax.
class DynamicConvImpl : public torch::nn::Module {
 public:
  explicit DynamicConvImpl(const DynamicConvOptions& options);

  /// Gating weights [B, K]; rows are nonnegative and sum to one.
  torch::Tensor gate(const torch::Tensor& x);

  torch::Tensor forward(const torch::Tensor& x);
  /// Convolves with sum_k gate[b, k] * kernel_k (+ mixed bias) using an explicit gate.
  torch::Tensor forward_with_gate(const torch::Tensor& x, const torch::Tensor& gate);

  const DynamicConvOptions& options() const { return options_; }
  torch::Tensor& kernel_bank() { return weight_; }  // [K, out, in, k, k]
  torch::Tensor& bias_bank() { return bias_; }      // [K, out]

 private:
  DynamicConvOptions options_;
  torch::Tensor weight_;
  torch::Tensor bias_;
  torch::nn::Linear gate_fc1_{nullptr};
  torch::nn::Linear gate_fc2_{nullptr};
};
TORCH_MODULE(DynamicConv);

/// Channel gate (pool -> bottleneck -> sigmoid) followed by a spatial gate
/// (channel mean/max -> 7x7 conv -> sigmoid).
class AttentionBlockImpl : public torch::nn::Module {
 public:
  explicit AttentionBlockImpl(int64_t channels, int64_t reduction = 4);

  torch::Tensor channel_gate(const torch::Tensor& x);  // [B, C, 1, 1]
  torch::Tensor spatial_gate(const torch::Tensor& x);  // [B, 1, H, W]

  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor forward_with_gates(const torch::Tensor& x, const torch::Tensor& channel,
                                   const torch::Tensor& spatial);

 private:
  torch::nn::Conv2d fc1_{nullptr};
  torch::nn::Conv2d fc2_{nullptr};
  torch::nn::Conv2d spatial_{nullptr};
};
TORCH_MODULE(AttentionBlock);

struct PPGConfig {
  int64_t channels = 16;
  int64_t num_kernels = 4;
  int64_t attention_reduction = 4;
  double lambda1 = 1.0;
  double lambda2 = 0.1;
  /// Blur strength at 256 x 256; scaled with the shorter image side.
  double blur_sigma = 5.0;
  int64_t blur_kernel = 21;

  /// Full sizing: 13 channels keeps the branch near 0.03M parameters.
  static PPGConfig full() {
    PPGConfig c;
    c.channels = 13;
    return c;
  }
};

/// Blur settings for an input whose shorter side is `min_side`.
std::pair<double, int64_t> scaled_blur(const PPGConfig& config, int64_t min_side);

/// DC(3->c) ReLU DC(c->c) ReLU Attn DC(c->c) ReLU DC(c->3): four dynamic convolutions.
class PriorNetImpl : public torch::nn::Module {
 public:
  PriorNetImpl(int64_t channels, int64_t num_kernels, int64_t reduction);
  torch::Tensor forward(const torch::Tensor& x);  // raw (pre-head) [B, 3, H, W]

 private:
  DynamicConv dc1_{nullptr}, dc2_{nullptr}, dc3_{nullptr}, dc4_{nullptr};
  AttentionBlock attention_{nullptr};
};
TORCH_MODULE(PriorNet);

struct PriorTensors {
  torch::Tensor transmission;  // [B, 3, H, W] in [kTransmissionFloor, 1)
  torch::Tensor background;    // [B, 3, 1, 1] in (0, 1)
};

class PPGBranchImpl : public torch::nn::Module {
 public:
  explicit PPGBranchImpl(const PPGConfig& config = {});

  /// images: [B, 3, H, W] in [0, 1].
  PriorTensors forward(const torch::Tensor& images);

  const PPGConfig& config() const { return config_; }

 private:
  PPGConfig config_;
  PriorNet transmission_net_{nullptr};
  PriorNet background_net_{nullptr};
};
TORCH_MODULE(PPGBranch);

/// Feature map used by the perceptual term; must be deterministic.
class PerceptualExtractor {
 public:
  virtual ~PerceptualExtractor() = default;
  virtual torch::Tensor features(const torch::Tensor& images) = 0;
};

/// Fixed, seeded, randomly initialized three-level strided conv pyramid. Offline default.
class RandomPyramidExtractor : public PerceptualExtractor {
 public:
  explicit RandomPyramidExtractor(uint64_t seed = 1234);
  torch::Tensor features(const torch::Tensor& images) override;

 private:
  std::vector<torch::Tensor> weights_;
};

/// Loads a TorchScript module (e.g. an exported VGG trunk) mapping [B,3,H,W] to features.
class TorchScriptExtractor : public PerceptualExtractor {
 public:
  explicit TorchScriptExtractor(const std::string& path);
  torch::Tensor features(const torch::Tensor& images) override;

 private:
  torch::jit::script::Module module_;
};

struct PPGLoss {
  torch::Tensor total;
  torch::Tensor reconstruction;  // mean |I_hat - I|
  torch::Tensor perceptual;      // mean squared feature difference
};

PPGLoss ppg_loss(const torch::Tensor& reconstructed, const torch::Tensor& observed,
                 PerceptualExtractor* extractor, double lambda1, double lambda2);

struct PPGLossValue {
  double total = 0.0;
  double reconstruction = 0.0;
  double perceptual = 0.0;
};

PPGLossValue ppg_loss(const ImageGrid& reconstructed, const ImageGrid& observed,
                      PerceptualExtractor* extractor, double lambda1, double lambda2);

/// Runs both sub-networks in inference mode and packages the result as a PhysicsPrior
/// (background replicated over the image).
physics::PhysicsPrior estimate_priors(const ImageGrid& image, PPGBranch& branch);

/// I_hat = GT * T + (1 - T) * B; delegates to physics::degrade.
ImageGrid ppg_reconstruct(const ImageGrid& ground_truth, const physics::PhysicsPrior& prior);

}  // namespace padiff::ppg
