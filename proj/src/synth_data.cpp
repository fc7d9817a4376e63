#include "padiff/synth_data.hpp"

#include <cstdio>
#include <fstream>

#include "padiff/error.hpp"
#include "padiff/image_io.hpp"

namespace padiff::data {

uint64_t image_seed(uint64_t seed, uint64_t index) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

ImageGrid square_resize(const ImageGrid& image, int64_t side) {
  if (side < 1) {
    throw DomainError("resolution must be >= 1");
  }
  const int64_t s = std::min(image.height(), image.width());
  auto t = image.tensor()
               .narrow(1, (image.height() - s) / 2, s)
               .narrow(2, (image.width() - s) / 2, s)
               .unsqueeze(0);
  if (s != side) {
    namespace F = torch::nn::functional;
    t = F::interpolate(t, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{side, side})
                              .mode(torch::kBilinear)
                              .align_corners(false)
                              .antialias(s > side));
  }
  auto out = t.squeeze(0).contiguous();
  if (image.range() == ValueRange::kPhysical) {
    out = out.clamp(0.0, 1.0);
  }
  return ImageGrid(out, image.range());
}

ImageGrid quantize8(const ImageGrid& image) {
  return ImageGrid(torch::round(image.tensor() * 255.0) / 255.0, image.range());
}

int64_t write_synth_dataset(const std::vector<std::string>& names,
                            const std::vector<ImageGrid>& clean, const std::filesystem::path& out,
                            const SynthDatasetOptions& options) {
  namespace fs = std::filesystem;
  if (names.size() != clean.size()) {
    throw DomainError("write_synth_dataset: names and images differ in count");
  }
  std::error_code ec;
  for (const char* sub : {"clean", "degraded", "transmission"}) {
    fs::create_directories(out / sub, ec);
    if (ec) {
      throw IoError((out / sub).string() + ": " + ec.message());
    }
  }
  std::ofstream lights(out / "background.csv", std::ios::trunc);
  if (!lights) {
    throw IoError((out / "background.csv").string() + ": cannot open for writing");
  }
  lights << "name,B_r,B_g,B_b\n";
  for (size_t i = 0; i < clean.size(); ++i) {
    ImageGrid image = options.resolution ? square_resize(clean[i], *options.resolution) : clean[i];
    image = quantize8(image);
    physics::SynthParams params = options.params;
    params.seed = image_seed(options.seed, i);
    auto pair = physics::synth_pair(image, params);
    const std::string file = fs::path(names[i]).stem().string() + ".png";
    io::write_png(out / "clean" / file, image);
    io::write_png(out / "degraded" / file, pair.degraded);
    io::write_png(out / "transmission" / file, pair.prior.transmission());
    char buf[128];
    std::snprintf(buf, sizeof(buf), ",%.17g,%.17g,%.17g\n", pair.prior.background().at(0, 0, 0),
                  pair.prior.background().at(0, 0, 1), pair.prior.background().at(0, 0, 2));
    lights << file << buf;
  }
  if (!lights) {
    throw IoError((out / "background.csv").string() + ": write failed");
  }
  return static_cast<int64_t>(clean.size());
}

}  // namespace padiff::data
