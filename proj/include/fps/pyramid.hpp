#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "fps/core/conv.hpp"
#include "fps/core/ops.hpp"

namespace fps {

/// Band-pass decomposition of a feature map: levels[m] = X_{m+1} - X_m for
/// successively blurred copies X_1..X_{M+1}; coarse = X_{M+1}.
template <class T>
struct FrequencyPyramid {
  std::vector<Tensor<T>> levels;
  std::vector<double> sigmas;
  Tensor<T> coarse;
};

/// sigma_m = 2^(m-1), m = 1..levels+1.
inline std::vector<double> default_sigmas(int levels) {
  std::vector<double> s;
  for (int m = 0; m <= levels; ++m) s.push_back(std::ldexp(1.0, m));
  return s;
}

inline int gaussian_radius(double sigma) { return static_cast<int>(std::ceil(3.0 * sigma)); }

/// Normalized 1-D Gaussian taps on the integer offsets [-ceil(3σ), ceil(3σ)].
inline std::vector<double> gaussian_taps(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian sigma must be positive, got " + std::to_string(sigma));
  const int r = gaussian_radius(sigma);
  std::vector<double> t(2 * r + 1);
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += t[i + r] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  for (auto& v : t) v /= s;
  return t;
}

/// Isotropic k x k kernel, k = 2*ceil(3σ)+1, renormalized to unit sum.
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian sigma must be positive, got " + std::to_string(sigma));
  const int r = gaussian_radius(sigma);
  const int k = 2 * r + 1;
  std::vector<double> g(static_cast<std::size_t>(k) * k);
  double s = 0.0;
  for (int i = -r; i <= r; ++i)
    for (int j = -r; j <= r; ++j) s += g[(i + r) * k + (j + r)] = std::exp(-(i * i + j * j) / (2.0 * sigma * sigma));
  for (auto& v : g) v /= s;
  return g;
}

/// X_m = F_in blurred with sigma_m (reflect padding, same size). The 2-D
/// Gaussian factorizes, so each blur runs as two 1-D passes.
template <class T>
std::vector<Tensor<T>> build_gaussian_stack(const Tensor<T>& input, const std::vector<double>& sigmas) {
  require_rank(input, 4, "build_gaussian_stack");
  for (std::size_t i = 1; i < sigmas.size(); ++i)
    if (!(sigmas[i] > sigmas[i - 1])) throw std::invalid_argument("pyramid sigmas must be strictly increasing");
  std::vector<Tensor<T>> stack;
  stack.reserve(sigmas.size());
  for (double s : sigmas) stack.push_back(separable_filter(input, gaussian_taps(s)));
  return stack;
}

template <class T>
FrequencyPyramid<T> build_frequency_pyramid(const std::vector<Tensor<T>>& stack, std::vector<double> sigmas = {}) {
  if (stack.size() < 2) throw std::invalid_argument("frequency pyramid needs at least two blurred levels");
  FrequencyPyramid<T> p;
  for (std::size_t m = 0; m + 1 < stack.size(); ++m) p.levels.push_back(sub(stack[m + 1], stack[m]));
  p.coarse = stack.back();
  p.sigmas = std::move(sigmas);
  return p;
}

template <class T>
FrequencyPyramid<T> frequency_pyramid(const Tensor<T>& input, const std::vector<double>& sigmas) {
  return build_frequency_pyramid(build_gaussian_stack(input, sigmas), sigmas);
}

}  // namespace fps
