#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "padiff/image_grid.hpp"
#include "padiff/physics.hpp"

// Paired dataset generation on disk: clean/, degraded/, transmission/ and background.csv.
namespace padiff::data {

struct SynthDatasetOptions {
  uint64_t seed = 0;
  /// Centre-crop to a square and resize to this side length.
  std::optional<int64_t> resolution;
  /// Depth, attenuation and background settings; the seed field is derived per image.
  physics::SynthParams params;
};

/// Square centre crop followed by an antialiased bilinear resize.
ImageGrid square_resize(const ImageGrid& image, int64_t side);

/// Rounds to the nearest 8-bit level so in-memory pairs match what a PNG round trip gives.
ImageGrid quantize8(const ImageGrid& image);

/// Synthesizes one pair per clean image. Returns the number of pairs written.
int64_t write_synth_dataset(const std::vector<std::string>& names,
                            const std::vector<ImageGrid>& clean, const std::filesystem::path& out,
                            const SynthDatasetOptions& options);

/// Seed used for image `index` of a dataset generated with `seed`.
uint64_t image_seed(uint64_t seed, uint64_t index);

}  // namespace padiff::data
