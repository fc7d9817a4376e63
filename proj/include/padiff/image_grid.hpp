#pragma once

#include <cstdint>
#include <string>

#include <torch/torch.h>

namespace padiff {

/// Declared value interval of an ImageGrid.
enum class ValueRange {
  kPhysical,   ///< [0, 1]; checked on construction
  kDiffusion,  ///< nominally [-1, 1]; sums such as the diffusion condition may exceed it
};

/// Real-valued H x W x C raster.
///
/// Storage is a contiguous float64 tensor laid out channel-first ([C, H, W]) so that it
/// batches into the NCHW tensors the networks consume without a permute. Construction
/// validates shape and finiteness, and for kPhysical grids that every entry lies in [0, 1].
class ImageGrid {
 public:
  ImageGrid() = default;

  /// Takes a [C, H, W] tensor (any floating dtype); copies to float64.
  explicit ImageGrid(const torch::Tensor& chw, ValueRange range = ValueRange::kPhysical);

  static ImageGrid filled(int64_t height, int64_t width, int64_t channels, double value,
                          ValueRange range = ValueRange::kPhysical);

  /// Inverse of batched(): accepts [1, C, H, W] or [C, H, W].
  static ImageGrid from_batched(const torch::Tensor& tensor,
                                ValueRange range = ValueRange::kPhysical);

  int64_t height() const { return data_.size(1); }
  int64_t width() const { return data_.size(2); }
  int64_t channels() const { return data_.size(0); }
  ValueRange range() const { return range_; }
  bool empty() const { return !data_.defined(); }

  double at(int64_t y, int64_t x, int64_t c) const;

  const torch::Tensor& tensor() const { return data_; }

  /// [1, C, H, W] copy in the requested dtype.
  torch::Tensor batched(torch::Dtype dtype = torch::kFloat32) const;

  /// [0, 1] -> [-1, 1]: 2x - 1.
  ImageGrid to_diffusion() const;
  /// [-1, 1] -> [0, 1]: (x + 1) / 2, clamped into the physical interval.
  ImageGrid to_physical() const;

  bool same_shape(const ImageGrid& other) const;
  std::string shape_string() const;

 private:
  torch::Tensor data_;
  ValueRange range_ = ValueRange::kPhysical;
};

/// Throws ShapeError naming `what` when the two grids differ in shape.
void require_same_shape(const ImageGrid& a, const ImageGrid& b, const char* what);

}  // namespace padiff
