#pragma once

#include <cstdint>

#include <torch/torch.h>

#include "padiff/image_grid.hpp"

// Implicit neural reconstruction: per-pixel MLP over (encoder features, encoded coordinates).
namespace padiff::inr {

/// Relative pixel coordinates, [H, W, 2] float64; channel 0 is x (column), channel 1 is y (row).
class CoordinateGrid {
 public:
  explicit CoordinateGrid(torch::Tensor coords) : coords_(std::move(coords)) {}
  const torch::Tensor& coords() const { return coords_; }
  int64_t height() const { return coords_.size(0); }
  int64_t width() const { return coords_.size(1); }

 private:
  torch::Tensor coords_;
};

/// Corners map to +-1; a single-pixel axis maps to 0.
CoordinateGrid make_grid(int64_t height, int64_t width);

/// Per pixel: for each coordinate component, (sin(2^i pi v), cos(2^i pi v)) for i = 0..L-1.
/// Output [H, W, 4L], ordered x-bands then y-bands.
torch::Tensor encode_coords(const CoordinateGrid& grid, int64_t num_frequencies);

/// Same encoding as a channel-first [4L, H, W] tensor in the requested dtype.
torch::Tensor encoded_coordinate_planes(int64_t height, int64_t width, int64_t num_frequencies,
                                        torch::Dtype dtype);

struct INRConfig {
  int64_t encoder_channels = 16;
  /// Residual 3x3 blocks after the stem convolution.
  int64_t encoder_blocks = 1;
  int64_t mlp_hidden = 64;
  int64_t mlp_hidden_layers = 3;
  int64_t num_frequencies = 10;

  /// Full sizing: 64-channel encoder, 160-wide MLP.
  static INRConfig full() {
    INRConfig c;
    c.encoder_channels = 64;
    c.mlp_hidden = 160;
    return c;
  }
};

class INRBranchImpl : public torch::nn::Module {
 public:
  explicit INRBranchImpl(const INRConfig& config = {});

  /// images: [B, 3, H, W] in diffusion space; returns I_inr in (-1, 1) via tanh.
  torch::Tensor forward(const torch::Tensor& images);

  torch::Tensor encode(const torch::Tensor& images);  // E: [B, C_e, H, W]
  /// Pointwise MLP over [B, C_e + 4L, H, W] inputs, implemented as 1x1 convolutions.
  torch::Tensor render(const torch::Tensor& features_and_coords);

  const INRConfig& config() const { return config_; }
  int64_t mlp_input_width() const { return config_.encoder_channels + 4 * config_.num_frequencies; }

 private:
  INRConfig config_;
  torch::nn::Conv2d stem_{nullptr};
  torch::nn::ModuleList blocks_;
  torch::nn::Sequential mlp_{nullptr};
};
TORCH_MODULE(INRBranch);

ImageGrid inr_render(const ImageGrid& image, INRBranch& branch);

/// Mean absolute error.
double inr_loss(const ImageGrid& rendered, const ImageGrid& ground_truth);
torch::Tensor inr_loss(const torch::Tensor& rendered, const torch::Tensor& ground_truth);

/// x_c = I_inr + I, no clamping.
ImageGrid fuse_condition(const ImageGrid& rendered, const ImageGrid& image);

}  // namespace padiff::inr
