#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fps/core/tensor.hpp"

namespace fps {

inline constexpr double kPsnrCap = 99.0;

/// Magnitude image of item `n` of an [N, 2, H, W] (real, imaginary) tensor.
template <class T>
std::vector<double> magnitude(const Tensor<T>& x, int n = 0) {
  require_rank(x, 4, "magnitude");
  if (x.dim(1) != 2) throw ShapeError("magnitude: expected 2 channels");
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const T* re = x.values().data() + static_cast<std::size_t>(n) * 2 * hw;
  std::vector<double> out(hw);
  for (std::size_t i = 0; i < hw; ++i) out[i] = std::hypot(static_cast<double>(re[i]), static_cast<double>(re[hw + i]));
  return out;
}

inline void check_same_size(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument(std::string(what) + ": images differ in size or are empty");
}

/// ||x_hat - x||^2 / ||x||^2.
inline double nmse(std::span<const double> x_hat, std::span<const double> x) {
  check_same_size(x_hat, x, "nmse");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    num += (x_hat[i] - x[i]) * (x_hat[i] - x[i]);
    den += x[i] * x[i];
  }
  if (den == 0.0) throw std::invalid_argument("nmse: reference image is all zero");
  return num / den;
}

inline double max_value(std::span<const double> x) { return *std::max_element(x.begin(), x.end()); }

/// 10 log10(range^2 / MSE); +inf for identical images.
inline double psnr(std::span<const double> x_hat, std::span<const double> x, double data_range) {
  check_same_size(x_hat, x, "psnr");
  double mse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mse += (x_hat[i] - x[i]) * (x_hat[i] - x[i]);
  mse /= static_cast<double>(x.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

inline double psnr(std::span<const double> x_hat, std::span<const double> x) { return psnr(x_hat, x, max_value(x)); }

struct SsimOptions {
  int window = 7;
  double k1 = 0.01, k2 = 0.03;
};

/// Mean SSIM over every full window position (uniform window, sample
/// covariance), on an h x w image.
inline double ssim(std::span<const double> x_hat, std::span<const double> x, int h, int w, double data_range,
                   SsimOptions opt = {}) {
  check_same_size(x_hat, x, "ssim");
  if (static_cast<std::size_t>(h) * w != x.size()) throw std::invalid_argument("ssim: extents do not match data");
  const int k = opt.window;
  if (h < k || w < k) throw std::invalid_argument("ssim: image smaller than the " + std::to_string(k) + "x" + std::to_string(k) + " window");
  const double c1 = (opt.k1 * data_range) * (opt.k1 * data_range);
  const double c2 = (opt.k2 * data_range) * (opt.k2 * data_range);
  const double np = static_cast<double>(k) * k;
  const double cov_norm = np / (np - 1.0);

  // Summed-area tables of x, y, x^2, y^2, xy.
  const int sw = w + 1;
  std::vector<double> sa(5 * static_cast<std::size_t>(h + 1) * sw, 0.0);
  auto table = [&](int t, int r, int c) -> double& { return sa[(static_cast<std::size_t>(t) * (h + 1) + r) * sw + c]; };
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double a = x_hat[static_cast<std::size_t>(r) * w + c], b = x[static_cast<std::size_t>(r) * w + c];
      const double v[5] = {a, b, a * a, b * b, a * b};
      for (int t = 0; t < 5; ++t)
        table(t, r + 1, c + 1) = v[t] + table(t, r, c + 1) + table(t, r + 1, c) - table(t, r, c);
    }
  double total = 0.0;
  for (int r = 0; r + k <= h; ++r)
    for (int c = 0; c + k <= w; ++c) {
      double s[5];
      for (int t = 0; t < 5; ++t)
        s[t] = (table(t, r + k, c + k) - table(t, r, c + k) - table(t, r + k, c) + table(t, r, c)) / np;
      const double mx = s[0], my = s[1];
      const double vx = cov_norm * (s[2] - mx * mx), vy = cov_norm * (s[3] - my * my);
      const double cxy = cov_norm * (s[4] - mx * my);
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  return total / (static_cast<double>(h - k + 1) * (w - k + 1));
}

struct ImageMetrics {
  std::string id;
  double nmse = 0.0, psnr_db = 0.0, ssim = 0.0;
};

/// Metrics on magnitudes, range = max of the reference magnitude.
inline ImageMetrics image_metrics(std::string id, std::span<const double> recon, std::span<const double> gt, int h, int w) {
  const double range = max_value(gt);
  return {std::move(id), nmse(recon, gt), psnr(recon, gt, range), ssim(recon, gt, h, w, range)};
}

struct MetricsReport {
  std::vector<ImageMetrics> images;
  ImageMetrics mean{"aggregate"}, stddev{"std"};

  void add(ImageMetrics m) { images.push_back(std::move(m)); }

  /// Fills mean and std; PSNR is capped before averaging.
  void finalize() {
    const double n = static_cast<double>(images.size());
    if (images.empty()) return;
    auto field = [](const ImageMetrics& m, int f) {
      return f == 0 ? m.nmse : f == 1 ? std::min(m.psnr_db, kPsnrCap) : m.ssim;
    };
    double mu[3] = {0, 0, 0}, var[3] = {0, 0, 0};
    for (const auto& m : images)
      for (int f = 0; f < 3; ++f) mu[f] += field(m, f) / n;
    for (const auto& m : images)
      for (int f = 0; f < 3; ++f) var[f] += (field(m, f) - mu[f]) * (field(m, f) - mu[f]) / n;
    mean = {"aggregate", mu[0], mu[1], mu[2]};
    stddev = {"std", std::sqrt(var[0]), std::sqrt(var[1]), std::sqrt(var[2])};
  }
};

inline std::string metrics_row(const ImageMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s,%.9g,%.6f,%.9f\n", m.id.c_str(), m.nmse, std::min(m.psnr_db, kPsnrCap), m.ssim);
  return buf;
}

/// Header, one row per image, a `std` row, then the final `aggregate` (mean) row.
inline std::string metrics_csv(const MetricsReport& r) {
  std::string out = "id,nmse,psnr_db,ssim\n";
  for (const auto& m : r.images) out += metrics_row(m);
  out += metrics_row(r.stddev);
  out += metrics_row(r.mean);
  return out;
}

}  // namespace fps
