#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <torch/torch.h>

#include "padiff/image_grid.hpp"

// Seeded generators for property tests.
namespace padiff::testing {

class Gen {
 public:
  explicit Gen(uint64_t seed) : rng_(seed), torch_(at::make_generator<at::CPUGeneratorImpl>(seed)) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  int64_t integer(int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(rng_);
  }
  torch::Tensor tensor(std::vector<int64_t> shape, double lo, double hi,
                       torch::Dtype dtype = torch::kFloat64) {
    return (torch::rand(shape, torch_, torch::kFloat64) * (hi - lo) + lo).to(dtype);
  }
  torch::Tensor normal(std::vector<int64_t> shape, torch::Dtype dtype = torch::kFloat64) {
    return torch::randn(shape, torch_, torch::kFloat64).to(dtype);
  }
  ImageGrid image(int64_t h, int64_t w, int64_t c = 3) {
    return ImageGrid(tensor({c, h, w}, 0.0, 1.0));
  }
  at::Generator& torch_gen() { return torch_; }

 private:
  std::mt19937_64 rng_;
  at::Generator torch_;
};

inline double max_abs(const torch::Tensor& a, const torch::Tensor& b) {
  return (a - b).abs().max().item<double>();
}

}  // namespace padiff::testing
