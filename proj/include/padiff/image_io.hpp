#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "padiff/image_grid.hpp"

// 8-bit PNG I/O. Pixel values map to [0, 1] by /255.
namespace padiff::io {

/// Reads an 8-bit PNG as RGB (grey and palette images are expanded). 16-bit files are refused.
ImageGrid read_png(const std::filesystem::path& path);

/// Writes a 1- or 3-channel physical-range grid, rounding to the nearest 8-bit level.
void write_png(const std::filesystem::path& path, const ImageGrid& image);

/// Sorted list of *.png files directly inside `dir`.
std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir);

}  // namespace padiff::io
