#pragma once

#include <array>
#include <cstdint>
#include <utility>

#include <torch/torch.h>

#include "padiff/image_grid.hpp"

// Koschmieder underwater imaging model: I = J * T + (1 - T) * B.
namespace padiff::physics {

/// Lower bound on transmission; keeps the inverse model away from division blow-up.
inline constexpr double kTransmissionFloor = 0.05;

/// Transmission map and background light for one image.
class PhysicsPrior {
 public:
  PhysicsPrior() = default;
  /// Validates matching shapes, transmission in [kTransmissionFloor, 1], background in [0, 1].
  PhysicsPrior(ImageGrid transmission, ImageGrid background);

  const ImageGrid& transmission() const { return transmission_; }
  const ImageGrid& background() const { return background_; }

 private:
  ImageGrid transmission_;
  ImageGrid background_;
};

struct SynthParams {
  double depth_scale = 1.0;
  std::array<double, 3> attenuation{0.8, 0.4, 0.2};  // red, green, blue
  std::pair<double, double> background_range{0.05, 0.45};
  uint64_t seed = 0;

  /// Throws DomainError on non-positive attenuation, negative depth or a bad range.
  void validate() const;
};

struct SynthResult {
  ImageGrid degraded;
  PhysicsPrior prior;
};

ImageGrid degrade(const ImageGrid& clean, const PhysicsPrior& prior);
ImageGrid recover(const ImageGrid& observed, const PhysicsPrior& prior);

/// Separable Gaussian blur with half-sample symmetric boundary extension.
/// kernel_size must be odd and >= 3.
ImageGrid gaussian_blur(const ImageGrid& image, double sigma, int64_t kernel_size);

SynthResult synth_pair(const ImageGrid& clean, const SynthParams& params);

/// Seeded clean RGB test scene: a colour gradient with soft blobs and a few hard-edged
/// rectangles, values in [0.05, 0.95].
ImageGrid procedural_scene(int64_t height, int64_t width, uint64_t seed);

/// Smooth depth field in [0, depth_scale]: three random low-frequency cosine modes.
torch::Tensor depth_field(int64_t height, int64_t width, double depth_scale, uint64_t seed);

/// T_c = max(exp(-attenuation_c * depth), kTransmissionFloor); depth is [H, W], result [3, H, W].
torch::Tensor transmission_from_depth(const torch::Tensor& depth,
                                      const std::array<double, 3>& attenuation);

// Tensor-level kernels shared by the grid API and the networks. They broadcast over leading
// dimensions and are differentiable; no range or floor checks are applied.
namespace kernels {

torch::Tensor koschmieder(const torch::Tensor& clean, const torch::Tensor& transmission,
                          const torch::Tensor& background);
torch::Tensor invert_koschmieder(const torch::Tensor& observed, const torch::Tensor& transmission,
                                 const torch::Tensor& background);

/// Normalized 1-D Gaussian taps, length kernel_size.
torch::Tensor gaussian_kernel1d(double sigma, int64_t kernel_size,
                                torch::Dtype dtype = torch::kFloat64);

/// Blurs the last two dimensions of an [N, C, H, W] tensor.
torch::Tensor gaussian_blur(const torch::Tensor& images, double sigma, int64_t kernel_size);

/// Index map for half-sample symmetric extension of an axis of length n by `radius`
/// samples on each side (d c b a | a b c d | d c b a).
torch::Tensor symmetric_pad_index(int64_t n, int64_t radius);

}  // namespace kernels

}  // namespace padiff::physics
