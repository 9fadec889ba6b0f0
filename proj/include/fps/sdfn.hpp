#pragma once

#include <string>

#include "fps/core/conv.hpp"
#include "fps/core/norm.hpp"
#include "fps/core/ops.hpp"
#include "fps/core/params.hpp"

namespace fps {

template <class T>
struct SdfnWeights {
  Tensor<T> ln_gamma, ln_beta;                // [C]
  Tensor<T> expand, expand_bias;              // [rC, C, 1, 1]
  Tensor<T> dw3_a, dw3_a_bias, dw5_a, dw5_a_bias;  // stage 1, [rC, 1, k, k]
  Tensor<T> dw3_b, dw3_b_bias, dw5_b, dw5_b_bias;  // stage 2, [2rC, 1, k, k]
  Tensor<T> fuse, fuse_bias;                  // [C, 4rC, 1, 1]
  int ratio = 2;
};

template <class T>
SdfnWeights<T> make_sdfn_weights(ParamStore<T>& s, const std::string& p, int c, int ratio) {
  if (ratio < 1) throw std::invalid_argument(p + ": expansion ratio must be at least 1");
  const int rc = ratio * c;
  SdfnWeights<T> w;
  w.ln_gamma = s.ones(p + ".ln.g", {c});
  w.ln_beta = s.zeros(p + ".ln.b", {c});
  w.expand = s.param(p + ".expand", {rc, c, 1, 1}, c);
  w.expand_bias = s.zeros(p + ".expand_b", {rc});
  w.dw3_a = s.param(p + ".dw3a", {rc, 1, 3, 3}, 9);
  w.dw3_a_bias = s.zeros(p + ".dw3a_b", {rc});
  w.dw5_a = s.param(p + ".dw5a", {rc, 1, 5, 5}, 25);
  w.dw5_a_bias = s.zeros(p + ".dw5a_b", {rc});
  w.dw3_b = s.param(p + ".dw3b", {2 * rc, 1, 3, 3}, 9);
  w.dw3_b_bias = s.zeros(p + ".dw3b_b", {2 * rc});
  w.dw5_b = s.param(p + ".dw5b", {2 * rc, 1, 5, 5}, 25);
  w.dw5_b_bias = s.zeros(p + ".dw5b_b", {2 * rc});
  w.fuse = s.param(p + ".fuse", {c, 4 * rc, 1, 1}, 4 * rc);
  w.fuse_bias = s.zeros(p + ".fuse_b", {c});
  w.ratio = ratio;
  return w;
}

/// Intermediate maps, kept for inspection in tests.
template <class T>
struct SdfnTrace {
  Tensor<T> expanded, p1, s1, p2, s2, out;
};

template <class T>
SdfnTrace<T> sdfn_trace(const Tensor<T>& f_s, const SdfnWeights<T>& w) {
  auto depthwise = [](const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b) {
    return conv2d(x, k, &b, {.groups = x.dim(1)});
  };
  SdfnTrace<T> t;
  t.expanded = conv2d(layer_norm(f_s, w.ln_gamma, w.ln_beta), w.expand, &w.expand_bias);
  t.p1 = relu(depthwise(t.expanded, w.dw3_a, w.dw3_a_bias));
  t.s1 = relu(depthwise(t.expanded, w.dw5_a, w.dw5_a_bias));
  t.p2 = relu(depthwise(concat_channels<T>({t.p1, t.s1}), w.dw3_b, w.dw3_b_bias));
  t.s2 = relu(depthwise(concat_channels<T>({t.s1, t.p1}), w.dw5_b, w.dw5_b_bias));
  t.out = add(conv2d(concat_channels<T>({t.p2, t.s2}), w.fuse, &w.fuse_bias), f_s);
  return t;
}

/// Multi-scale feed-forward block with its own LayerNorm and residual:
/// out = 1x1([p2, s2]) + F_s.
template <class T>
Tensor<T> sdfn_forward(const Tensor<T>& f_s, const SdfnWeights<T>& w) {
  return sdfn_trace(f_s, w).out;
}

/// Plain two-layer 1x1 feed-forward network used when SDFN is switched off.
template <class T>
struct FeedForwardWeights {
  Tensor<T> ln_gamma, ln_beta, w1, b1, w2, b2;
};

template <class T>
FeedForwardWeights<T> make_ffn_weights(ParamStore<T>& s, const std::string& p, int c, int ratio) {
  const int rc = ratio * c;
  return {s.ones(p + ".ln.g", {c}),         s.zeros(p + ".ln.b", {c}),
          s.param(p + ".w1", {rc, c, 1, 1}, c), s.zeros(p + ".b1", {rc}),
          s.param(p + ".w2", {c, rc, 1, 1}, rc), s.zeros(p + ".b2", {c})};
}

template <class T>
Tensor<T> ffn_forward(const Tensor<T>& x, const FeedForwardWeights<T>& w) {
  Tensor<T> h = relu(conv2d(layer_norm(x, w.ln_gamma, w.ln_beta), w.w1, &w.b1));
  return add(conv2d(h, w.w2, &w.b2), x);
}

}  // namespace fps
