#include "padiff/inr.hpp"

#include <cmath>
#include <numbers>

#include "padiff/error.hpp"
#include "padiff/nn_util.hpp"

namespace padiff::inr {

namespace {

torch::Tensor axis_coords(int64_t n) {
  if (n == 1) {
    return torch::zeros({1}, torch::kFloat64);
  }
  return torch::arange(n, torch::kFloat64) * (2.0 / static_cast<double>(n - 1)) - 1.0;
}

torch::Tensor band_features(const torch::Tensor& values, int64_t num_frequencies) {
  std::vector<torch::Tensor> parts;
  parts.reserve(2 * num_frequencies);
  for (int64_t i = 0; i < num_frequencies; ++i) {
    auto arg = values * (std::ldexp(1.0, static_cast<int>(i)) * std::numbers::pi);
    parts.push_back(torch::sin(arg));
    parts.push_back(torch::cos(arg));
  }
  return torch::stack(parts, -1);
}

}  // namespace

CoordinateGrid make_grid(int64_t height, int64_t width) {
  if (height < 1 || width < 1) {
    throw DomainError("make_grid: H and W must be >= 1");
  }
  auto xs = axis_coords(width).view({1, width}).expand({height, width});
  auto ys = axis_coords(height).view({height, 1}).expand({height, width});
  return CoordinateGrid(torch::stack({xs, ys}, -1).contiguous());
}

torch::Tensor encode_coords(const CoordinateGrid& grid, int64_t num_frequencies) {
  if (num_frequencies < 1) {
    throw DomainError("encode_coords: L must be >= 1");
  }
  const auto& c = grid.coords();
  auto x_bands = band_features(c.select(-1, 0), num_frequencies);
  auto y_bands = band_features(c.select(-1, 1), num_frequencies);
  return torch::cat({x_bands, y_bands}, -1);
}

torch::Tensor encoded_coordinate_planes(int64_t height, int64_t width, int64_t num_frequencies,
                                        torch::Dtype dtype) {
  return encode_coords(make_grid(height, width), num_frequencies).permute({2, 0, 1}).to(dtype);
}

INRBranchImpl::INRBranchImpl(const INRConfig& config) : config_(config) {
  if (config.num_frequencies < 1 || config.encoder_channels < 1 || config.mlp_hidden_layers < 1) {
    throw DomainError("INRConfig: sizes must be positive");
  }
  const int64_t ce = config.encoder_channels;
  stem_ = register_module("stem", nn::conv3x3(3, ce));
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int64_t i = 0; i < config.encoder_blocks; ++i) {
    blocks_->push_back(torch::nn::Sequential(nn::conv3x3(ce, ce), torch::nn::ReLU(),
                                             nn::conv3x3(ce, ce)));
  }
  torch::nn::Sequential mlp;
  int64_t width = mlp_input_width();
  for (int64_t i = 0; i < config.mlp_hidden_layers; ++i) {
    mlp->push_back(nn::conv1x1(width, config.mlp_hidden));
    mlp->push_back(torch::nn::ReLU());
    width = config.mlp_hidden;
  }
  mlp->push_back(nn::conv1x1(width, 3));
  mlp_ = register_module("mlp", mlp);
}

torch::Tensor INRBranchImpl::encode(const torch::Tensor& images) {
  auto h = stem_(images);
  for (const auto& block : *blocks_) {
    h = h + block->as<torch::nn::SequentialImpl>()->forward(torch::relu(h));
  }
  return h;
}

torch::Tensor INRBranchImpl::render(const torch::Tensor& features_and_coords) {
  if (features_and_coords.size(1) != mlp_input_width()) {
    throw ShapeError("INR render: expected " + std::to_string(mlp_input_width()) + " channels");
  }
  return torch::tanh(mlp_->forward(features_and_coords));
}

torch::Tensor INRBranchImpl::forward(const torch::Tensor& images) {
  auto features = encode(images);
  auto coords = encoded_coordinate_planes(images.size(2), images.size(3), config_.num_frequencies,
                                          images.scalar_type())
                    .to(images.device())
                    .unsqueeze(0)
                    .expand({images.size(0), -1, -1, -1});
  return render(torch::cat({features, coords}, 1));
}

ImageGrid inr_render(const ImageGrid& image, INRBranch& branch) {
  if (image.channels() != 3) {
    throw ShapeError("inr_render expects an RGB image");
  }
  torch::NoGradGuard no_grad;
  auto dtype = branch->parameters().front().scalar_type();
  const bool physical = image.range() == ValueRange::kPhysical;
  // The branch works in diffusion space; physical inputs round-trip through [-1, 1].
  auto input = physical ? image.to_diffusion().batched(dtype) : image.batched(dtype);
  auto out = branch->forward(input).to(torch::kFloat64);
  ImageGrid rendered = ImageGrid::from_batched(out, ValueRange::kDiffusion);
  return physical ? rendered.to_physical() : rendered;
}

torch::Tensor inr_loss(const torch::Tensor& rendered, const torch::Tensor& ground_truth) {
  if (rendered.sizes() != ground_truth.sizes()) {
    throw ShapeError("inr_loss: shape mismatch");
  }
  return (rendered - ground_truth).abs().mean();
}

double inr_loss(const ImageGrid& rendered, const ImageGrid& ground_truth) {
  require_same_shape(rendered, ground_truth, "inr_loss");
  return inr_loss(rendered.tensor(), ground_truth.tensor()).item<double>();
}

ImageGrid fuse_condition(const ImageGrid& rendered, const ImageGrid& image) {
  require_same_shape(rendered, image, "fuse_condition");
  if (rendered.range() != image.range()) {
    throw DomainError("fuse_condition: value ranges differ");
  }
  return ImageGrid(rendered.tensor() + image.tensor(), ValueRange::kDiffusion);
}

}  // namespace padiff::inr
