#include "padiff/physics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "padiff/error.hpp"

namespace padiff::physics {

namespace {

void require_image_channels(const ImageGrid& grid, const char* what) {
  if (grid.channels() != 1 && grid.channels() != 3) {
    throw ShapeError(std::string(what) + ": expected 1 or 3 channels, got " +
                     std::to_string(grid.channels()));
  }
}

void require_physical(const ImageGrid& grid, const char* what) {
  if (grid.range() != ValueRange::kPhysical) {
    throw DomainError(std::string(what) + ": expected a [0,1] image");
  }
}

}  // namespace

PhysicsPrior::PhysicsPrior(ImageGrid transmission, ImageGrid background)
    : transmission_(std::move(transmission)), background_(std::move(background)) {
  require_same_shape(transmission_, background_, "PhysicsPrior");
  require_image_channels(transmission_, "PhysicsPrior");
  require_physical(transmission_, "PhysicsPrior transmission");
  require_physical(background_, "PhysicsPrior background");
  const double t_min = transmission_.tensor().min().item<double>();
  if (t_min < kTransmissionFloor) {
    std::ostringstream msg;
    msg << "transmission " << t_min << " below floor " << kTransmissionFloor;
    throw DomainError(msg.str());
  }
}

void SynthParams::validate() const {
  if (!(depth_scale >= 0.0) || !std::isfinite(depth_scale)) {
    throw DomainError("depth_scale must be a finite non-negative number");
  }
  for (double a : attenuation) {
    if (!(a > 0.0) || !std::isfinite(a)) {
      throw DomainError("attenuation coefficients must be positive");
    }
  }
  const auto [lo, hi] = background_range;
  if (!(lo >= 0.0 && lo <= hi && hi <= 1.0)) {
    throw DomainError("background_range must be an interval inside [0,1]");
  }
}

namespace kernels {

torch::Tensor koschmieder(const torch::Tensor& clean, const torch::Tensor& transmission,
                          const torch::Tensor& background) {
  return clean * transmission + (1.0 - transmission) * background;
}

torch::Tensor invert_koschmieder(const torch::Tensor& observed, const torch::Tensor& transmission,
                                 const torch::Tensor& background) {
  const auto inv_t = 1.0 / transmission;
  return observed * inv_t + background * (1.0 - inv_t);
}

torch::Tensor gaussian_kernel1d(double sigma, int64_t kernel_size, torch::Dtype dtype) {
  if (kernel_size < 3 || kernel_size % 2 == 0) {
    throw DomainError("gaussian kernel_size must be odd and >= 3, got " +
                      std::to_string(kernel_size));
  }
  if (!(sigma > 0.0)) {
    throw DomainError("gaussian sigma must be positive");
  }
  const int64_t radius = kernel_size / 2;
  auto offsets = torch::arange(-radius, radius + 1, torch::kFloat64);
  auto taps = torch::exp(-(offsets * offsets) / (2.0 * sigma * sigma));
  return (taps / taps.sum()).to(dtype);
}

torch::Tensor symmetric_pad_index(int64_t n, int64_t radius) {
  auto idx = torch::arange(-radius, n + radius, torch::kLong);
  // Period 2n, mirrored about the half-sample points -0.5 and n - 0.5.
  auto m = torch::remainder(idx, 2 * n);
  return torch::where(m >= n, 2 * n - 1 - m, m);
}

torch::Tensor gaussian_blur(const torch::Tensor& images, double sigma, int64_t kernel_size) {
  TORCH_CHECK(images.dim() == 4, "gaussian_blur expects [N, C, H, W]");
  const int64_t channels = images.size(1);
  const int64_t radius = kernel_size / 2;
  auto taps = gaussian_kernel1d(sigma, kernel_size, images.scalar_type());
  auto along_w = taps.view({1, 1, 1, kernel_size}).repeat({channels, 1, 1, 1});
  auto along_h = taps.view({1, 1, kernel_size, 1}).repeat({channels, 1, 1, 1});

  auto padded_w = images.index_select(3, symmetric_pad_index(images.size(3), radius));
  auto out = torch::conv2d(padded_w, along_w, torch::Tensor(), at::IntArrayRef{1, 1}, at::IntArrayRef{0, 0}, at::IntArrayRef{1, 1}, channels);
  auto padded_h = out.index_select(2, symmetric_pad_index(images.size(2), radius));
  return torch::conv2d(padded_h, along_h, torch::Tensor(), at::IntArrayRef{1, 1}, at::IntArrayRef{0, 0}, at::IntArrayRef{1, 1}, channels);
}

}  // namespace kernels

ImageGrid degrade(const ImageGrid& clean, const PhysicsPrior& prior) {
  require_physical(clean, "degrade");
  require_same_shape(clean, prior.transmission(), "degrade");
  auto out = kernels::koschmieder(clean.tensor(), prior.transmission().tensor(),
                                  prior.background().tensor());
  // Convex combination of [0,1] values; clamp only absorbs last-ulp rounding.
  return ImageGrid(out.clamp(0.0, 1.0), ValueRange::kPhysical);
}

ImageGrid recover(const ImageGrid& observed, const PhysicsPrior& prior) {
  require_same_shape(observed, prior.transmission(), "recover");
  if (prior.transmission().tensor().min().item<double>() < kTransmissionFloor) {
    throw DomainError("recover: transmission below floor");
  }
  auto out = kernels::invert_koschmieder(observed.tensor(), prior.transmission().tensor(),
                                         prior.background().tensor());
  // The inverse model can leave [0,1] when the prior does not match the observation.
  return ImageGrid(out, ValueRange::kDiffusion);
}

ImageGrid gaussian_blur(const ImageGrid& image, double sigma, int64_t kernel_size) {
  auto out = kernels::gaussian_blur(image.tensor().unsqueeze(0), sigma, kernel_size)[0];
  if (image.range() == ValueRange::kPhysical) {
    out = out.clamp(0.0, 1.0);
  }
  return ImageGrid(out, image.range());
}

torch::Tensor depth_field(int64_t height, int64_t width, double depth_scale, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> freq(0, 2);
  std::uniform_real_distribution<double> amp(0.5, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);

  auto ys = torch::arange(height, torch::kFloat64).view({height, 1}) / static_cast<double>(height);
  auto xs = torch::arange(width, torch::kFloat64).view({1, width}) / static_cast<double>(width);
  auto depth = torch::zeros({height, width}, torch::kFloat64);
  for (int mode = 0; mode < 3; ++mode) {
    int fx = freq(rng);
    int fy = freq(rng);
    if (fx == 0 && fy == 0) {
      fx = 1;
    }
    const double a = amp(rng);
    const double p = phase(rng);
    depth = depth + a * torch::cos(2.0 * std::numbers::pi * (fx * xs + fy * ys) + p);
  }
  const double lo = depth.min().item<double>();
  const double hi = depth.max().item<double>();
  if (depth_scale == 0.0 || hi - lo <= 0.0) {
    return torch::zeros({height, width}, torch::kFloat64);
  }
  return (depth - lo) / (hi - lo) * depth_scale;
}

torch::Tensor transmission_from_depth(const torch::Tensor& depth,
                                      const std::array<double, 3>& attenuation) {
  auto beta = torch::tensor({attenuation[0], attenuation[1], attenuation[2]}, torch::kFloat64)
                  .view({3, 1, 1});
  return torch::exp(-beta * depth.to(torch::kFloat64).unsqueeze(0)).clamp_min(kTransmissionFloor);
}

SynthResult synth_pair(const ImageGrid& clean, const SynthParams& params) {
  params.validate();
  require_physical(clean, "synth_pair");
  if (clean.channels() != 3) {
    throw ShapeError("synth_pair expects an RGB image");
  }
  const int64_t h = clean.height();
  const int64_t w = clean.width();
  // Depth and background draw from independent streams derived from the one seed.
  auto depth = depth_field(h, w, params.depth_scale, params.seed);
  std::mt19937_64 rng(params.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> bg(params.background_range.first,
                                            params.background_range.second);
  std::array<double, 3> light{};
  for (double& v : light) {
    v = bg(rng);
  }
  auto transmission = transmission_from_depth(depth, params.attenuation);
  auto background = torch::tensor({light[0], light[1], light[2]}, torch::kFloat64)
                        .view({3, 1, 1})
                        .expand({3, h, w})
                        .contiguous();
  PhysicsPrior prior{ImageGrid(transmission), ImageGrid(background)};
  return {degrade(clean, prior), std::move(prior)};
}

ImageGrid procedural_scene(int64_t height, int64_t width, uint64_t seed) {
  if (height < 1 || width < 1) {
    throw DomainError("procedural_scene: H and W must be >= 1");
  }
  std::mt19937_64 rng(seed * 0x2545f4914f6cdd1dULL + 0x632be59bd9b4e019ULL);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto ys = torch::linspace(0.0, 1.0, height, torch::kFloat64).view({height, 1});
  auto xs = torch::linspace(0.0, 1.0, width, torch::kFloat64).view({1, width});

  std::vector<torch::Tensor> planes;
  for (int c = 0; c < 3; ++c) {
    planes.push_back(u(rng) * 0.4 + 0.3 * (u(rng) * xs + u(rng) * ys) + torch::zeros({height, width}, torch::kFloat64));
  }
  auto img = torch::stack(planes);
  for (int k = 0; k < 3; ++k) {
    const double cy = u(rng), cx = u(rng), r = 0.1 + 0.2 * u(rng);
    auto blob = torch::exp(-((ys - cy).pow(2) + (xs - cx).pow(2)) / (2.0 * r * r));
    auto colour = torch::tensor({u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5}, torch::kFloat64);
    img = img + 0.5 * colour.view({3, 1, 1}) * blob.unsqueeze(0);
  }
  for (int k = 0; k < 2; ++k) {
    const auto y0 = static_cast<int64_t>(u(rng) * height * 0.7);
    const auto x0 = static_cast<int64_t>(u(rng) * width * 0.7);
    const auto hh = std::max<int64_t>(1, static_cast<int64_t>((0.1 + 0.2 * u(rng)) * height));
    const auto ww = std::max<int64_t>(1, static_cast<int64_t>((0.1 + 0.2 * u(rng)) * width));
    auto colour = torch::tensor({u(rng), u(rng), u(rng)}, torch::kFloat64).view({3, 1, 1});
    img.narrow(1, y0, std::min(hh, height - y0)).narrow(2, x0, std::min(ww, width - x0)).copy_(
        colour.expand({3, std::min(hh, height - y0), std::min(ww, width - x0)}));
  }
  return ImageGrid(img.clamp(0.05, 0.95).contiguous());
}

}  // namespace padiff::physics
