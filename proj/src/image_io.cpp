#include "padiff/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <png.h>

#include "padiff/error.hpp"

namespace padiff::io {

ImageGrid read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!std::filesystem::is_regular_file(path)) {
    throw IoError(path.string() + ": no such file");
  }
  if (png_image_begin_read_from_file(&image, path.c_str()) == 0) {
    throw FormatError(path.string() + ": " + image.message);
  }
  if ((image.format & PNG_FORMAT_FLAG_LINEAR) != 0) {
    png_image_free(&image);
    throw FormatError(path.string() + ": 16-bit PNG is not supported, convert to 8-bit");
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr) == 0) {
    throw FormatError(path.string() + ": " + image.message);
  }
  const int64_t h = image.height;
  const int64_t w = image.width;
  auto bytes = torch::from_blob(buffer.data(), {h, w, 3}, torch::kUInt8);
  auto data = bytes.permute({2, 0, 1}).to(torch::kFloat64) / 255.0;
  return ImageGrid(data.contiguous());
}

void write_png(const std::filesystem::path& path, const ImageGrid& image) {
  if (image.range() != ValueRange::kPhysical) {
    throw DomainError(path.string() + ": only physical-range images can be written");
  }
  const int64_t c = image.channels();
  if (c != 1 && c != 3) {
    throw ShapeError(path.string() + ": expected 1 or 3 channels, got " + std::to_string(c));
  }
  auto bytes = torch::round(image.tensor() * 255.0)
                   .clamp(0.0, 255.0)
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
  png_image out;
  std::memset(&out, 0, sizeof(out));
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(image.width());
  out.height = static_cast<png_uint_32>(image.height());
  out.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (png_image_write_to_file(&out, path.c_str(), 0, bytes.data_ptr<uint8_t>(), 0, nullptr) == 0) {
    throw IoError(path.string() + ": " + out.message);
  }
}

std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw IoError(dir.string() + ": not a directory");
  }
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace padiff::io
