#include "padiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "padiff/error.hpp"
#include "padiff/physics.hpp"

namespace padiff::metrics {

namespace {

void require_rgb(const ImageGrid& img, const char* what) {
  if (img.channels() != 3 || img.range() != ValueRange::kPhysical) {
    throw DomainError(std::string(what) + ": expects a physical-range RGB image");
  }
}

double alpha_trimmed_mean(std::vector<double> values, double trim) {
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  const auto cut = static_cast<size_t>(std::floor(trim * static_cast<double>(n)));
  if (2 * cut >= n) {
    return 0.0;
  }
  double sum = 0.0;
  for (size_t i = cut; i < n - cut; ++i) {
    sum += values[i];
  }
  return sum / static_cast<double>(n - 2 * cut);
}

// Sobel gradient magnitude with edge replication, [H, W] in and out.
torch::Tensor sobel_magnitude(const torch::Tensor& plane) {
  auto x = plane.unsqueeze(0).unsqueeze(0);
  namespace F = torch::nn::functional;
  x = F::pad(x, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
  auto gx = torch::tensor({-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0}, torch::kFloat64)
                .view({1, 1, 3, 3});
  auto gy = gx.transpose(2, 3).contiguous();
  auto dx = torch::conv2d(x, gx);
  auto dy = torch::conv2d(x, gy);
  return torch::sqrt(dx * dx + dy * dy).squeeze(0).squeeze(0);
}

// Per-block max and min over non-overlapping block x block tiles; partial tiles are dropped.
// `planes` is [C, H, W]; the reduction runs over all channels of a tile.
std::pair<torch::Tensor, torch::Tensor> block_extrema(const torch::Tensor& planes, int64_t block) {
  const int64_t by = planes.size(1) / block;
  const int64_t bx = planes.size(2) / block;
  auto tiles = planes.narrow(1, 0, by * block)
                   .narrow(2, 0, bx * block)
                   .reshape({planes.size(0), by, block, bx, block})
                   .permute({1, 3, 0, 2, 4})
                   .reshape({by * bx, -1});
  return {std::get<0>(tiles.max(1)), std::get<0>(tiles.min(1))};
}

double eme(const torch::Tensor& plane, int64_t block) {
  auto [mx, mn] = block_extrema(plane.unsqueeze(0), block);
  const int64_t count = mx.numel();
  if (count == 0) {
    return 0.0;
  }
  auto valid = (mn > 0) & (mx > 0);
  auto ratio = torch::where(valid, mx / torch::where(valid, mn, torch::ones_like(mn)),
                            torch::ones_like(mx));
  return 2.0 / static_cast<double>(count) * torch::log(ratio).sum().item<double>();
}

double log_amee(const torch::Tensor& planes, int64_t block) {
  auto [mx, mn] = block_extrema(planes, block);
  const int64_t count = mx.numel();
  if (count == 0) {
    return 0.0;
  }
  auto top = mx - mn;
  auto bot = mx + mn;
  auto valid = (top > 0) & (bot > 0);
  auto r = torch::where(valid, top / torch::where(valid, bot, torch::ones_like(bot)),
                        torch::ones_like(top));
  return -1.0 / static_cast<double>(count) * (r * torch::log(r)).sum().item<double>();
}

// sRGB [3, H, W] in [0, 1] to CIELab under D65.
torch::Tensor srgb_to_lab(const torch::Tensor& rgb) {
  auto linear = torch::where(rgb <= 0.04045, rgb / 12.92, torch::pow((rgb + 0.055) / 1.055, 2.4));
  auto m = torch::tensor({0.4124564, 0.3575761, 0.1804375,  //
                          0.2126729, 0.7151522, 0.0721750,  //
                          0.0193339, 0.1191920, 0.9503041},
                         torch::kFloat64)
               .view({3, 3});
  // Normalizing the rows by the white point keeps neutral greys at a = b = 0.
  m = m / m.sum(1, true);
  auto xyz = torch::einsum("ij,jhw->ihw", {m, linear});
  const double eps = 216.0 / 24389.0;
  const double kappa = 24389.0 / 27.0;
  auto f = torch::where(xyz > eps, torch::pow(xyz, 1.0 / 3.0), (kappa * xyz + 16.0) / 116.0);
  auto l = 116.0 * f[1] - 16.0;
  auto a = 500.0 * (f[0] - f[1]);
  auto b = 200.0 * (f[1] - f[2]);
  return torch::stack({l, a, b});
}

}  // namespace

double psnr(const ImageGrid& a, const ImageGrid& b) {
  require_same_shape(a, b, "psnr");
  const double mse = (a.tensor() - b.tensor()).pow(2).mean().item<double>();
  if (mse == 0.0) {
    return kPsnrCap;
  }
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const ImageGrid& a, const ImageGrid& b, const SsimWindow& window) {
  require_same_shape(a, b, "ssim");
  if (a.height() < window.size || a.width() < window.size) {
    throw ShapeError("ssim: image " + a.shape_string() + " is smaller than the " +
                     std::to_string(window.size) + "-pixel window");
  }
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  auto g = physics::kernels::gaussian_kernel1d(window.sigma, window.size, torch::kFloat64);
  auto kernel = torch::outer(g, g).view({1, 1, window.size, window.size});
  auto filter = [&](const torch::Tensor& x) {
    return torch::conv2d(x.unsqueeze(1), kernel);  // [C, 1, h, w]
  };
  const auto& x = a.tensor();
  const auto& y = b.tensor();
  auto mu_x = filter(x);
  auto mu_y = filter(y);
  auto sxx = filter(x * x) - mu_x * mu_x;
  auto syy = filter(y * y) - mu_y * mu_y;
  auto sxy = filter(x * y) - mu_x * mu_y;
  auto map = ((2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)) /
             ((mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2));
  return map.mean().item<double>();
}

UciqeTerms uciqe_terms(const ImageGrid& rgb) {
  require_rgb(rgb, "uciqe");
  auto lab = srgb_to_lab(rgb.tensor()) / 100.0;
  auto l = lab[0].flatten();
  auto chroma = torch::sqrt(lab[1] * lab[1] + lab[2] * lab[2]).flatten();

  UciqeTerms out;
  out.chroma_std = torch::sqrt((chroma - chroma.mean()).pow(2).mean()).item<double>();
  auto q = torch::quantile(l, torch::tensor({0.01, 0.99}, torch::kFloat64));
  out.luminance_contrast = (q[1] - q[0]).item<double>();
  auto denom = torch::sqrt(chroma * chroma + l * l);
  auto sat = torch::where(denom > 0, chroma / torch::where(denom > 0, denom, torch::ones_like(denom)),
                          torch::zeros_like(denom));
  out.saturation_mean = sat.mean().item<double>();
  out.score = 0.4680 * out.chroma_std + 0.2745 * out.luminance_contrast +
              0.2576 * out.saturation_mean;
  return out;
}

double uciqe(const ImageGrid& rgb) { return uciqe_terms(rgb).score; }

UiqmTerms uiqm_terms(const ImageGrid& rgb, int64_t block) {
  require_rgb(rgb, "uiqm");
  if (block < 1) {
    throw DomainError("uiqm: block size must be positive");
  }
  auto img = rgb.tensor() * 255.0;
  auto r = img[0];
  auto g = img[1];
  auto b = img[2];

  auto rg = (r - g).flatten().contiguous();
  auto yb = ((r + g) * 0.5 - b).flatten().contiguous();
  auto to_vec = [](const torch::Tensor& t) {
    return std::vector<double>(t.data_ptr<double>(), t.data_ptr<double>() + t.numel());
  };
  const double mu_rg = alpha_trimmed_mean(to_vec(rg), 0.1);
  const double mu_yb = alpha_trimmed_mean(to_vec(yb), 0.1);
  const double var_rg = (rg - mu_rg).pow(2).mean().item<double>();
  const double var_yb = (yb - mu_yb).pow(2).mean().item<double>();

  UiqmTerms out;
  out.colorfulness = -0.0268 * std::sqrt(mu_rg * mu_rg + mu_yb * mu_yb) +
                     0.1586 * std::sqrt(var_rg + var_yb);

  const double weights[3] = {0.299, 0.587, 0.114};
  for (int c = 0; c < 3; ++c) {
    auto plane = img[c];
    out.sharpness += weights[c] * eme(sobel_magnitude(plane) * plane / 255.0, block);
  }
  out.contrast = log_amee(img, block);
  out.score = 0.0282 * out.colorfulness + 0.2953 * out.sharpness + 3.5753 * out.contrast;
  return out;
}

double uiqm(const ImageGrid& rgb) { return uiqm_terms(rgb).score; }

MetricRow MetricReport::mean() const {
  if (rows.empty()) {
    throw DomainError("MetricReport: no rows to average");
  }
  MetricRow m;
  m.name = "mean";
  for (const auto& r : rows) {
    m.psnr += r.psnr;
    m.ssim += r.ssim;
    m.uciqe += r.uciqe;
    m.uiqm += r.uiqm;
  }
  const double n = static_cast<double>(rows.size());
  m.psnr /= n;
  m.ssim /= n;
  m.uciqe /= n;
  m.uiqm /= n;
  return m;
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out << "name,psnr,ssim,uciqe,uiqm\n";
  auto line = [&](const MetricRow& r) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), ",%.17g,%.17g,%.17g,%.17g\n", r.psnr, r.ssim, r.uciqe, r.uiqm);
    out << r.name << buf;
  };
  for (const auto& r : rows) {
    line(r);
  }
  line(mean());
  return out.str();
}

MetricRow evaluate(const std::string& name, const ImageGrid& enhanced, const ImageGrid& reference) {
  MetricRow row;
  row.name = name;
  row.psnr = psnr(enhanced, reference);
  row.ssim = ssim(enhanced, reference);
  row.uciqe = uciqe(enhanced);
  row.uiqm = uiqm(enhanced);
  return row;
}

}  // namespace padiff::metrics
