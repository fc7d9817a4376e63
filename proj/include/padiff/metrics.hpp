#pragma once

#include <string>
#include <vector>

#include "padiff/image_grid.hpp"

// Full-reference and no-reference image quality scores. All inputs are physical-range RGB.
namespace padiff::metrics {

/// Returned by psnr() for identical images.
inline constexpr double kPsnrCap = 100.0;

double psnr(const ImageGrid& a, const ImageGrid& b);

struct SsimWindow {
  int64_t size = 11;
  double sigma = 1.5;
};

/// Mean SSIM over the valid (unpadded) window positions, averaged across channels.
double ssim(const ImageGrid& a, const ImageGrid& b, const SsimWindow& window = {});

struct UciqeTerms {
  double chroma_std = 0.0;
  double luminance_contrast = 0.0;
  double saturation_mean = 0.0;
  double score = 0.0;
};

/// CIELab (D65) statistics; L, a and b are divided by 100 before the weighted sum.
UciqeTerms uciqe_terms(const ImageGrid& rgb);
double uciqe(const ImageGrid& rgb);

struct UiqmTerms {
  double colorfulness = 0.0;  // UICM
  double sharpness = 0.0;     // UISM
  double contrast = 0.0;      // UIConM
  double score = 0.0;
};

/// Computed on the 0..255 scale with 8 x 8 blocks for the EME and logAMEE measures.
UiqmTerms uiqm_terms(const ImageGrid& rgb, int64_t block = 8);
double uiqm(const ImageGrid& rgb);

struct MetricRow {
  std::string name;
  double psnr = 0.0;
  double ssim = 0.0;
  double uciqe = 0.0;
  double uiqm = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;

  /// Arithmetic mean of every column, named "mean". Requires at least one row.
  MetricRow mean() const;
  /// Header, one line per row, then the mean row.
  std::string to_csv() const;
};

/// Scores `enhanced` against `reference`; no-reference scores use `enhanced`.
MetricRow evaluate(const std::string& name, const ImageGrid& enhanced, const ImageGrid& reference);

}  // namespace padiff::metrics
