#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <string>
#include <vector>

#include "fps/core/fft.hpp"
#include "fps/model.hpp"

namespace fps {

/// Distance of FFT bin (r, c) from DC with wrap-around frequencies.
inline double frequency_radius(int r, int c, int h, int w) {
  const int fy = r <= h / 2 ? r : r - h;
  const int fx = c <= w / 2 ? c : c - w;
  return std::hypot(static_cast<double>(fy), static_cast<double>(fx));
}

/// Largest radius present on an h x w grid (a corner bin).
inline double nyquist_radius(int h, int w) { return std::hypot(h / 2.0, w / 2.0); }

/// Mean FFT amplitude per integer radius bin [b, b+1), averaged over every
/// item and channel of a real [N, C, H, W] map. floor(min(H, W) / 2) bins.
template <class T>
std::vector<double> radial_amplitude(const Tensor<T>& x) {
  require_rank(x, 4, "radial_spectrum");
  const int h = x.dim(2), w = x.dim(3);
  if (!is_power_of_two(h) || !is_power_of_two(w)) throw ShapeError("radial_spectrum: extents must be powers of two");
  const int bins = std::min(h, w) / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<double> sum(std::max(bins, 1), 0.0);
  std::vector<double> count(sum.size(), 0.0);
  std::vector<std::complex<double>> g(hw);
  for (int n = 0; n < x.dim(0); ++n)
    for (int ch = 0; ch < x.dim(1); ++ch) {
      const T* p = x.values().data() + (static_cast<std::size_t>(n) * x.dim(1) + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) g[i] = static_cast<double>(p[i]);
      detail::fft2_inplace(g, h, w, false);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const auto b = static_cast<std::size_t>(frequency_radius(r, c, h, w));
          if (b >= sum.size()) continue;
          sum[b] += std::abs(g[static_cast<std::size_t>(r) * w + c]);
          count[b] += 1.0;
        }
    }
  for (std::size_t b = 0; b < sum.size(); ++b) sum[b] = count[b] > 0 ? sum[b] / count[b] : 0.0;
  return sum;
}

inline constexpr double kAmplitudeFloor = 1e-30;

inline std::vector<double> log_amplitude(std::vector<double> amp) {
  for (auto& a : amp) a = std::log10(std::max(a, kAmplitudeFloor));
  return amp;
}

/// log10 of the mean amplitude per radius bin.
template <class T>
std::vector<double> radial_spectrum(const Tensor<T>& x) {
  return log_amplitude(radial_amplitude(x));
}

/// Removes every frequency whose radius bin floor(r) lies below `cutoff` from
/// a [1, 2, H, W] complex image and returns the magnitude of the rest, H x W.
template <class T>
std::vector<double> highpass_residual(const Tensor<T>& image, double cutoff) {
  require_rank(image, 4, "highpass_residual");
  if (image.dim(0) != 1 || image.dim(1) != 2) throw ShapeError("highpass_residual: expected a [1, 2, H, W] image");
  const int h = image.dim(2), w = image.dim(3);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<std::complex<double>> g(hw);
  for (std::size_t i = 0; i < hw; ++i) g[i] = {static_cast<double>(image.values()[i]), static_cast<double>(image.values()[hw + i])};
  detail::fft2_inplace(g, h, w, false);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (std::floor(frequency_radius(r, c, h, w)) < cutoff) g[static_cast<std::size_t>(r) * w + c] = 0.0;
  detail::fft2_inplace(g, h, w, true);
  std::vector<double> out(hw);
  for (std::size_t i = 0; i < hw; ++i) out[i] = std::abs(g[i]);
  return out;
}

struct SpectrumComparison {
  std::vector<double> a, b;  // log10 amplitude per bin

  [[nodiscard]] std::string csv() const {
    std::string out = "radius,log_amp_a,log_amp_b\n";
    char buf[96];
    for (std::size_t i = 0; i < a.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", i, a[i], b[i]);
      out += buf;
    }
    return out;
  }
};

/// Output of the deepest encoder level for each probe batch.
template <class T>
Tensor<T> last_encoder_features(const Model<T>& m, const Tensor<T>& zf, const Tensor<T>& y, const Tensor<T>& mask) {
  NoGradGuard guard;
  ForwardTrace<T> trace;
  forward(m, zf, y, mask, &trace);
  return trace.bottleneck;
}

/// Radial spectra of both models' last-encoder features, amplitudes averaged
/// over all probes before the log.
template <class T>
SpectrumComparison compare_variants(const Model<T>& a, const Model<T>& b, const std::vector<Tensor<T>>& zf,
                                    const std::vector<Tensor<T>>& y, const std::vector<Tensor<T>>& mask) {
  if (zf.empty() || zf.size() != y.size() || zf.size() != mask.size())
    throw std::invalid_argument("compare_variants: probe lists must be non-empty and aligned");
  auto spectrum = [&](const Model<T>& m) {
    std::vector<double> acc;
    for (std::size_t i = 0; i < zf.size(); ++i) {
      const auto amp = radial_amplitude(last_encoder_features(m, zf[i], y[i], mask[i]));
      if (acc.empty()) acc.assign(amp.size(), 0.0);
      for (std::size_t k = 0; k < amp.size(); ++k) acc[k] += amp[k] / static_cast<double>(zf.size());
    }
    return log_amplitude(std::move(acc));
  };
  return {spectrum(a), spectrum(b)};
}

}  // namespace fps
