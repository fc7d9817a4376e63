#include "padiff/image_grid.hpp"

#include <sstream>

#include "padiff/error.hpp"

namespace padiff {

ImageGrid::ImageGrid(const torch::Tensor& chw, ValueRange range) : range_(range) {
  if (!chw.defined() || chw.dim() != 3) {
    throw ShapeError("ImageGrid expects a [C, H, W] tensor");
  }
  if (chw.size(0) < 1 || chw.size(1) < 1 || chw.size(2) < 1) {
    throw ShapeError("ImageGrid requires H >= 1, W >= 1, C >= 1");
  }
  if (!chw.is_floating_point()) {
    throw DomainError("ImageGrid requires floating point data");
  }
  data_ = chw.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  if (!torch::isfinite(data_).all().item<bool>()) {
    throw DomainError("ImageGrid entries must be finite");
  }
  if (range_ == ValueRange::kPhysical) {
    const double lo = data_.min().item<double>();
    const double hi = data_.max().item<double>();
    if (lo < 0.0 || hi > 1.0) {
      std::ostringstream msg;
      msg << "ImageGrid entries outside [0,1]: min " << lo << ", max " << hi;
      throw DomainError(msg.str());
    }
  }
}

ImageGrid ImageGrid::filled(int64_t height, int64_t width, int64_t channels, double value,
                            ValueRange range) {
  return ImageGrid(torch::full({channels, height, width}, value, torch::kFloat64), range);
}

ImageGrid ImageGrid::from_batched(const torch::Tensor& tensor, ValueRange range) {
  if (tensor.dim() == 4) {
    if (tensor.size(0) != 1) {
      throw ShapeError("from_batched expects a batch of one");
    }
    return ImageGrid(tensor[0], range);
  }
  return ImageGrid(tensor, range);
}

double ImageGrid::at(int64_t y, int64_t x, int64_t c) const {
  if (y < 0 || y >= height() || x < 0 || x >= width() || c < 0 || c >= channels()) {
    throw ShapeError("ImageGrid index out of bounds");
  }
  return data_.accessor<double, 3>()[c][y][x];
}

torch::Tensor ImageGrid::batched(torch::Dtype dtype) const {
  return data_.unsqueeze(0).to(dtype).contiguous();
}

ImageGrid ImageGrid::to_diffusion() const {
  return ImageGrid(data_ * 2.0 - 1.0, ValueRange::kDiffusion);
}

ImageGrid ImageGrid::to_physical() const {
  return ImageGrid(((data_ + 1.0) * 0.5).clamp(0.0, 1.0), ValueRange::kPhysical);
}

bool ImageGrid::same_shape(const ImageGrid& other) const {
  return !empty() && !other.empty() && data_.sizes() == other.data_.sizes();
}

std::string ImageGrid::shape_string() const {
  if (empty()) {
    return "<empty>";
  }
  std::ostringstream out;
  out << height() << "x" << width() << "x" << channels();
  return out.str();
}

void require_same_shape(const ImageGrid& a, const ImageGrid& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

}  // namespace padiff
