#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <string>
#include <vector>

#include "fps/core/tensor.hpp"

namespace fps {

inline bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

namespace detail {

/// In-place iterative radix-2 transform, unnormalized. sign = -1 forward.
inline void fft_radix2(std::complex<double>* a, int n, int sign) {
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (int len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * std::numbers::pi / len;
    const int half = len / 2;
    for (int k = 0; k < half; ++k) {
      // Twiddles evaluated directly: no drift from repeated multiplication.
      const std::complex<double> w(std::cos(ang * k), std::sin(ang * k));
      for (int i = 0; i < n; i += len) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + half] * w;
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
}

/// Orthonormal 2-D transform of an H x W complex grid stored row-major.
inline void fft2_inplace(std::vector<std::complex<double>>& g, int h, int w, bool inverse) {
  const int sign = inverse ? 1 : -1;
  for (int y = 0; y < h; ++y) fft_radix2(g.data() + static_cast<std::size_t>(y) * w, w, sign);
  std::vector<std::complex<double>> column(h);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) column[y] = g[static_cast<std::size_t>(y) * w + x];
    fft_radix2(column.data(), h, sign);
    for (int y = 0; y < h; ++y) g[static_cast<std::size_t>(y) * w + x] = column[y];
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(h) * w);
  for (auto& v : g) v *= s;
}

/// Applies the transform to every item of an [N, 2, H, W] real/imag buffer.
template <class T>
void fft2_planes(const T* in, T* out, int n, int h, int w, bool inverse, bool accumulate) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<std::complex<double>> g(hw);
  for (int b = 0; b < n; ++b) {
    const T* re = in + static_cast<std::size_t>(b) * 2 * hw;
    const T* im = re + hw;
    for (std::size_t i = 0; i < hw; ++i) g[i] = {static_cast<double>(re[i]), static_cast<double>(im[i])};
    fft2_inplace(g, h, w, inverse);
    T* ore = out + static_cast<std::size_t>(b) * 2 * hw;
    T* oim = ore + hw;
    for (std::size_t i = 0; i < hw; ++i) {
      if (accumulate) {
        ore[i] += static_cast<T>(g[i].real());
        oim[i] += static_cast<T>(g[i].imag());
      } else {
        ore[i] = static_cast<T>(g[i].real());
        oim[i] = static_cast<T>(g[i].imag());
      }
    }
  }
}

template <class T>
Tensor<T> fft2_op(const Tensor<T>& x, bool inverse) {
  require_rank(x, 4, inverse ? "ifft2" : "fft2");
  if (x.dim(1) != 2) throw ShapeError("fft2: expected 2 channels (real, imaginary), got " + std::to_string(x.dim(1)));
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  if (!is_power_of_two(h) || !is_power_of_two(w))
    throw ShapeError("fft2: extents " + std::to_string(h) + "x" + std::to_string(w) + " are not powers of two");
  std::vector<T> out(x.numel());
  fft2_planes(x.values().data(), out.data(), n, h, w, inverse, false);
  // The transform is unitary, so its adjoint is the opposite-direction transform.
  return make_result<T>(x.shape(), std::move(out), {x}, [n, h, w, inverse](Node<T>& self) {
    fft2_planes(self.grad.data(), grad_sink(self, 0), n, h, w, !inverse, true);
  });
}

}  // namespace detail

/// Orthonormal 2-D DFT of an [N, 2, H, W] (real, imaginary) image. The DC
/// coefficient sits at index (0, 0) (no centering shift).
template <class T>
Tensor<T> fft2(const Tensor<T>& x) {
  return detail::fft2_op(x, false);
}

template <class T>
Tensor<T> ifft2(const Tensor<T>& x) {
  return detail::fft2_op(x, true);
}

}  // namespace fps
