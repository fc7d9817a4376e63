#include "padiff/nn_util.hpp"

namespace padiff::nn {

torch::Tensor SeededDropoutImpl::forward(const torch::Tensor& x) {
  if (!is_training() || p_ <= 0.0) {
    return x;
  }
  auto keep = torch::empty_like(x).bernoulli_(1.0 - p_, gen_);
  return x * keep / (1.0 - p_);
}

void set_dropout_generator(torch::nn::Module& root, std::optional<at::Generator> gen) {
  for (const auto& child : root.modules(/*include_self=*/true)) {
    if (auto* drop = child->as<SeededDropoutImpl>()) {
      drop->set_generator(gen);
    }
  }
}

int64_t count_parameters(const torch::nn::Module& module) {
  int64_t total = 0;
  for (const auto& p : module.parameters()) {
    total += p.numel();
  }
  return total;
}

torch::nn::Conv2d conv1x1(int64_t in, int64_t out, bool bias) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).bias(bias));
}

torch::nn::Conv2d conv3x3(int64_t in, int64_t out, bool bias, int64_t stride) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(bias));
}

torch::nn::Conv2d depthwise(int64_t channels, int64_t kernel_size, bool bias) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, kernel_size)
                               .padding(kernel_size / 2)
                               .groups(channels)
                               .bias(bias));
}

std::pair<torch::Tensor, torch::Tensor> scaled_attention(const torch::Tensor& q,
                                                         const torch::Tensor& k,
                                                         const torch::Tensor& v,
                                                         const torch::Tensor& scale) {
  auto logits = torch::bmm(q, k.transpose(1, 2)) / scale;
  auto attn = torch::softmax(logits, -1);
  return {torch::bmm(attn, v), attn};
}

torch::Tensor to_tokens(const torch::Tensor& x) {
  return x.flatten(2).transpose(1, 2);
}

torch::Tensor from_tokens(const torch::Tensor& tokens, int64_t height, int64_t width) {
  return tokens.transpose(1, 2).reshape({tokens.size(0), tokens.size(2), height, width});
}

}  // namespace padiff::nn
