#pragma once

#include <string>
#include <vector>

#include "fps/core/conv.hpp"
#include "fps/core/ops.hpp"
#include "fps/core/params.hpp"

namespace fps {

inline constexpr int kExpertCount = 8;

/// Expert inventory, in coefficient order.
enum class Expert { avg_pool3, sep3, sep5, sep7, dil2, dil3, dil5, point };

template <class T>
struct HefrWeights {
  Tensor<T> w1;  // [D, C]
  Tensor<T> w2;  // [E, D]
  std::vector<Tensor<T>> kernel, bias;  // separable experts hold the depthwise part here
  std::vector<Tensor<T>> pw, pw_bias;   // pointwise half of the separable experts
  Tensor<T> out, out_bias;              // [C, C, 1, 1]
};

template <class T>
HefrWeights<T> make_hefr_weights(ParamStore<T>& s, const std::string& p, int c, int hidden = 32) {
  HefrWeights<T> w;
  w.w1 = s.param(p + ".w1", {hidden, c}, c);
  w.w2 = s.param(p + ".w2", {kExpertCount, hidden}, hidden);
  w.kernel.resize(kExpertCount);
  w.bias.resize(kExpertCount);
  w.pw.resize(kExpertCount);
  w.pw_bias.resize(kExpertCount);
  for (int e = 0; e < kExpertCount; ++e) {
    const std::string n = p + ".e" + std::to_string(e);
    switch (static_cast<Expert>(e)) {
      case Expert::avg_pool3:
        break;
      case Expert::sep3:
      case Expert::sep5:
      case Expert::sep7: {
        const int k = 3 + 2 * (e - static_cast<int>(Expert::sep3));
        w.kernel[e] = s.param(n + ".dw", {c, 1, k, k}, k * k);
        w.bias[e] = s.zeros(n + ".dw_b", {c});
        w.pw[e] = s.param(n + ".pw", {c, c, 1, 1}, c);
        w.pw_bias[e] = s.zeros(n + ".pw_b", {c});
        break;
      }
      case Expert::dil2:
      case Expert::dil3:
      case Expert::dil5:
        w.kernel[e] = s.param(n + ".w", {c, c, 3, 3}, 9 * c);
        w.bias[e] = s.zeros(n + ".b", {c});
        break;
      case Expert::point:
        w.kernel[e] = s.param(n + ".w", {c, c, 1, 1}, c);
        w.bias[e] = s.zeros(n + ".b", {c});
        break;
    }
  }
  w.out = s.param(p + ".out", {c, c, 1, 1}, c);
  w.out_bias = s.zeros(p + ".out_b", {c});
  return w;
}

/// Per-sample channel means, [N, C].
template <class T>
Tensor<T> channel_descriptor(const Tensor<T>& f_h) {
  return mean_hw(f_h);
}

/// softmax(W2 relu(W1 K)), [N, E].
template <class T>
Tensor<T> expert_coefficients(const Tensor<T>& k, const HefrWeights<T>& w) {
  return softmax(linear(relu(linear(k, w.w1)), w.w2));
}

template <class T>
Tensor<T> apply_expert(const Tensor<T>& x, const HefrWeights<T>& w, int e) {
  switch (static_cast<Expert>(e)) {
    case Expert::avg_pool3:
      return avg_pool3(x);
    case Expert::sep3:
    case Expert::sep5:
    case Expert::sep7:
      return conv2d(conv2d(x, w.kernel[e], &w.bias[e], {.groups = x.dim(1)}), w.pw[e], &w.pw_bias[e]);
    case Expert::dil2:
      return conv2d(x, w.kernel[e], &w.bias[e], {.dilation = 2});
    case Expert::dil3:
      return conv2d(x, w.kernel[e], &w.bias[e], {.dilation = 3});
    case Expert::dil5:
      return conv2d(x, w.kernel[e], &w.bias[e], {.dilation = 5});
    case Expert::point:
      return conv2d(x, w.kernel[e], &w.bias[e]);
  }
  throw std::logic_error("unknown expert");
}

/// out = 1x1(sum_e V_e expert_e(F_h)) + F_h.
template <class T>
Tensor<T> hefr_forward(const Tensor<T>& f_h, const HefrWeights<T>& w) {
  Tensor<T> coeff = expert_coefficients(channel_descriptor(f_h), w);
  std::vector<Tensor<T>> parts;
  for (int e = 0; e < kExpertCount; ++e) parts.push_back(apply_expert(f_h, w, e));
  return add(conv2d(weighted_combination(parts, coeff), w.out, &w.out_bias), f_h);
}

}  // namespace fps
