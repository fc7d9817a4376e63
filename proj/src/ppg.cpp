#include "padiff/ppg.hpp"

#include <cmath>

#include "padiff/error.hpp"
#include "padiff/nn_util.hpp"

namespace padiff::ppg {

DynamicConvImpl::DynamicConvImpl(const DynamicConvOptions& options) : options_(options) {
  if (options.num_kernels < 1 || options.kernel_size % 2 == 0) {
    throw DomainError("DynamicConv needs K >= 1 and an odd kernel size");
  }
  const int64_t k = options.kernel_size;
  weight_ = register_parameter(
      "weight", torch::empty({options.num_kernels, options.out_channels, options.in_channels, k, k}));
  bias_ = register_parameter("bias", torch::empty({options.num_kernels, options.out_channels}));
  const double fan_in = static_cast<double>(options.in_channels * k * k);
  const double bound = 1.0 / std::sqrt(fan_in);
  {
    torch::NoGradGuard no_grad;
    for (int64_t i = 0; i < options.num_kernels; ++i) {
      torch::nn::init::kaiming_uniform_(weight_[i], std::sqrt(5.0));
    }
    bias_.uniform_(-bound, bound);
  }
  const int64_t hidden = std::max<int64_t>(4, options.in_channels / 4);
  gate_fc1_ = register_module("gate_fc1", torch::nn::Linear(options.in_channels, hidden));
  gate_fc2_ = register_module("gate_fc2", torch::nn::Linear(hidden, options.num_kernels));
}

torch::Tensor DynamicConvImpl::gate(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != options_.in_channels) {
    throw ShapeError("DynamicConv: expected " + std::to_string(options_.in_channels) +
                     " input channels");
  }
  auto pooled = x.mean({2, 3});
  return torch::softmax(gate_fc2_(torch::relu(gate_fc1_(pooled))), -1);
}

torch::Tensor DynamicConvImpl::forward(const torch::Tensor& x) {
  return forward_with_gate(x, gate(x));
}

torch::Tensor DynamicConvImpl::forward_with_gate(const torch::Tensor& x,
                                                 const torch::Tensor& gate) {
  if (x.dim() != 4 || x.size(1) != options_.in_channels) {
    throw ShapeError("DynamicConv: expected " + std::to_string(options_.in_channels) +
                     " input channels");
  }
  const int64_t batch = x.size(0);
  const int64_t k = options_.kernel_size;
  TORCH_CHECK(gate.size(0) == batch && gate.size(1) == options_.num_kernels,
              "DynamicConv: gate must be [B, K]");
  // Aggregate per-sample kernels, then run all samples as one grouped convolution.
  auto mixed_w = torch::einsum("bk,koihw->boihw", {gate, weight_})
                     .reshape({batch * options_.out_channels, options_.in_channels, k, k});
  auto mixed_b = torch::matmul(gate, bias_).reshape({batch * options_.out_channels});
  auto folded = x.reshape({1, batch * options_.in_channels, x.size(2), x.size(3)});
  auto out = torch::conv2d(folded, mixed_w, mixed_b, 1, k / 2, 1, batch);
  return out.view({batch, options_.out_channels, x.size(2), x.size(3)});
}

AttentionBlockImpl::AttentionBlockImpl(int64_t channels, int64_t reduction) {
  const int64_t hidden = std::max<int64_t>(1, channels / reduction);
  fc1_ = register_module("fc1", nn::conv1x1(channels, hidden));
  fc2_ = register_module("fc2", nn::conv1x1(hidden, channels));
  spatial_ = register_module(
      "spatial", torch::nn::Conv2d(torch::nn::Conv2dOptions(2, 1, 7).padding(3)));
}

torch::Tensor AttentionBlockImpl::channel_gate(const torch::Tensor& x) {
  auto pooled = x.mean({2, 3}, /*keepdim=*/true);
  return torch::sigmoid(fc2_(torch::relu(fc1_(pooled))));
}

torch::Tensor AttentionBlockImpl::spatial_gate(const torch::Tensor& x) {
  auto stats = torch::cat({x.mean(1, true), std::get<0>(x.max(1, true))}, 1);
  return torch::sigmoid(spatial_(stats));
}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& x) {
  auto after_channel = x * channel_gate(x);
  return after_channel * spatial_gate(after_channel);
}

torch::Tensor AttentionBlockImpl::forward_with_gates(const torch::Tensor& x,
                                                     const torch::Tensor& channel,
                                                     const torch::Tensor& spatial) {
  return x * channel * spatial;
}

std::pair<double, int64_t> scaled_blur(const PPGConfig& config, int64_t min_side) {
  const double scale = static_cast<double>(min_side) / 256.0;
  const double sigma = std::max(0.5, config.blur_sigma * scale);
  auto kernel = static_cast<int64_t>(std::lround(static_cast<double>(config.blur_kernel) * scale));
  if (kernel % 2 == 0) {
    ++kernel;
  }
  return {sigma, std::max<int64_t>(3, kernel)};
}

PriorNetImpl::PriorNetImpl(int64_t channels, int64_t num_kernels, int64_t reduction) {
  auto dc = [&](int64_t in, int64_t out) {
    return DynamicConv(DynamicConvOptions{in, out, 3, num_kernels});
  };
  dc1_ = register_module("dc1", dc(3, channels));
  dc2_ = register_module("dc2", dc(channels, channels));
  attention_ = register_module("attention", AttentionBlock(channels, reduction));
  dc3_ = register_module("dc3", dc(channels, channels));
  dc4_ = register_module("dc4", dc(channels, 3));
}

torch::Tensor PriorNetImpl::forward(const torch::Tensor& x) {
  auto h = torch::relu(dc1_(x));
  h = torch::relu(dc2_(h));
  h = attention_(h);
  h = torch::relu(dc3_(h));
  return dc4_(h);
}

PPGBranchImpl::PPGBranchImpl(const PPGConfig& config) : config_(config) {
  if (config.lambda1 < 0.0 || config.lambda2 < 0.0) {
    throw DomainError("PPG loss weights must be nonnegative");
  }
  transmission_net_ = register_module(
      "transmission_net",
      PriorNet(config.channels, config.num_kernels, config.attention_reduction));
  background_net_ = register_module(
      "background_net", PriorNet(config.channels, config.num_kernels, config.attention_reduction));
}

PriorTensors PPGBranchImpl::forward(const torch::Tensor& images) {
  constexpr double floor = physics::kTransmissionFloor;
  auto transmission = floor + (1.0 - floor) * torch::sigmoid(transmission_net_(images));
  const auto [sigma, kernel] = scaled_blur(config_, std::min(images.size(2), images.size(3)));
  auto blurred = physics::kernels::gaussian_blur(images, sigma, kernel);
  auto background = torch::sigmoid(background_net_(blurred).mean({2, 3}, /*keepdim=*/true));
  return {transmission, background};
}

RandomPyramidExtractor::RandomPyramidExtractor(uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const int64_t widths[] = {3, 8, 16, 32};
  for (int i = 0; i < 3; ++i) {
    const double fan_in = static_cast<double>(widths[i] * 9);
    weights_.push_back(torch::randn({widths[i + 1], widths[i], 3, 3}, gen, torch::kFloat32) *
                       std::sqrt(2.0 / fan_in));
  }
}

torch::Tensor RandomPyramidExtractor::features(const torch::Tensor& images) {
  auto h = images;
  std::vector<torch::Tensor> levels;
  for (const auto& w : weights_) {
    h = torch::relu(torch::conv2d(h, w.to(h.scalar_type()), {}, 2, 1));
    levels.push_back(h.flatten(1));
  }
  return torch::cat(levels, 1);
}

TorchScriptExtractor::TorchScriptExtractor(const std::string& path) {
  try {
    module_ = torch::jit::load(path);
  } catch (const c10::Error& e) {
    throw IoError("cannot load perceptual extractor '" + path + "': " + e.what_without_backtrace());
  }
  module_.eval();
}

torch::Tensor TorchScriptExtractor::features(const torch::Tensor& images) {
  return module_.forward({images}).toTensor();
}

PPGLoss ppg_loss(const torch::Tensor& reconstructed, const torch::Tensor& observed,
                 PerceptualExtractor* extractor, double lambda1, double lambda2) {
  if (reconstructed.sizes() != observed.sizes()) {
    throw ShapeError("ppg_loss: shape mismatch");
  }
  auto recon = (reconstructed - observed).abs().mean();
  auto perceptual = torch::zeros({}, reconstructed.options());
  if (lambda2 != 0.0 && extractor != nullptr) {
    auto diff = extractor->features(reconstructed) - extractor->features(observed);
    perceptual = diff.pow(2).mean();
  }
  return {lambda1 * recon + lambda2 * perceptual, recon, perceptual};
}

PPGLossValue ppg_loss(const ImageGrid& reconstructed, const ImageGrid& observed,
                      PerceptualExtractor* extractor, double lambda1, double lambda2) {
  require_same_shape(reconstructed, observed, "ppg_loss");
  torch::NoGradGuard no_grad;
  auto loss = ppg_loss(reconstructed.batched(torch::kFloat64), observed.batched(torch::kFloat64),
                       extractor, lambda1, lambda2);
  return {loss.total.item<double>(), loss.reconstruction.item<double>(),
          loss.perceptual.item<double>()};
}

physics::PhysicsPrior estimate_priors(const ImageGrid& image, PPGBranch& branch) {
  if (image.channels() != 3 || image.range() != ValueRange::kPhysical) {
    throw ShapeError("estimate_priors expects an RGB image in [0,1]");
  }
  torch::NoGradGuard no_grad;
  const bool was_training = branch->is_training();
  branch->eval();
  auto param = branch->parameters().front();
  auto priors = branch->forward(image.batched(param.scalar_type()));
  branch->train(was_training);
  auto background = priors.background.expand_as(priors.transmission);
  // Float rounding can land a hair under the floor; snap back onto it.
  auto transmission = priors.transmission.to(torch::kFloat64).clamp(physics::kTransmissionFloor, 1.0);
  return physics::PhysicsPrior(ImageGrid::from_batched(transmission),
                               ImageGrid::from_batched(background.to(torch::kFloat64)));
}

ImageGrid ppg_reconstruct(const ImageGrid& ground_truth, const physics::PhysicsPrior& prior) {
  return physics::degrade(ground_truth, prior);
}

}  // namespace padiff::ppg
