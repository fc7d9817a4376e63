#pragma once

#include <cstdint>
#include <optional>

#include <torch/torch.h>

namespace padiff::nn {

/// Dropout whose mask is drawn from a caller-supplied generator, so training trajectories
/// are reproducible and checkpointable. Without a generator it falls back to the global one.
class SeededDropoutImpl : public torch::nn::Module {
 public:
  explicit SeededDropoutImpl(double p = 0.0) : p_(p) {}

  torch::Tensor forward(const torch::Tensor& x);

  void set_generator(std::optional<at::Generator> gen) { gen_ = std::move(gen); }
  double p() const { return p_; }

 private:
  double p_;
  std::optional<at::Generator> gen_;
};
TORCH_MODULE(SeededDropout);

/// Walks a module tree and points every SeededDropout at `gen`.
void set_dropout_generator(torch::nn::Module& root, std::optional<at::Generator> gen);

int64_t count_parameters(const torch::nn::Module& module);

torch::nn::Conv2d conv1x1(int64_t in, int64_t out, bool bias = true);
torch::nn::Conv2d conv3x3(int64_t in, int64_t out, bool bias = true, int64_t stride = 1);
/// Depthwise convolution with `same` padding; kernel_size odd.
torch::nn::Conv2d depthwise(int64_t channels, int64_t kernel_size, bool bias = true);

/// Row-softmax attention over flattened positions.
/// q: [B, Nq, D], k: [B, Nk, D], v: [B, Nk, Dv]; returns ([B, Nq, Dv], [B, Nq, Nk]).
std::pair<torch::Tensor, torch::Tensor> scaled_attention(const torch::Tensor& q,
                                                         const torch::Tensor& k,
                                                         const torch::Tensor& v,
                                                         const torch::Tensor& scale);

/// [B, C, H, W] -> [B, H*W, C]
torch::Tensor to_tokens(const torch::Tensor& x);
/// [B, H*W, C] -> [B, C, H, W]
torch::Tensor from_tokens(const torch::Tensor& tokens, int64_t height, int64_t width);

}  // namespace padiff::nn
