#pragma once

#include <cmath>
#include <vector>

#include "fps/core/tensor.hpp"

namespace fps {

/// Channel-wise layer normalization of an [N, C, H, W] tensor: every (n,h,w)
/// channel vector is standardized (biased variance) and then scaled and
/// shifted per channel.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  require_rank(x, 4, "layer_norm");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  require_shape(gamma, {c}, "layer_norm gamma");
  require_shape(beta, {c}, "layer_norm beta");
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(static_cast<std::size_t>(n) * hw);
  const T* xv = x.values().data();
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  for (int b = 0; b < n; ++b)
    for (std::size_t s = 0; s < hw; ++s) {
      const T* base = xv + static_cast<std::size_t>(b) * c * hw + s;
      T mean = T(0);
      for (int ch = 0; ch < c; ++ch) mean += base[ch * hw];
      mean /= static_cast<T>(c);
      T var = T(0);
      for (int ch = 0; ch < c; ++ch) {
        const T d = base[ch * hw] - mean;
        var += d * d;
      }
      var /= static_cast<T>(c);
      const T r = T(1) / std::sqrt(var + eps);
      rstd[static_cast<std::size_t>(b) * hw + s] = r;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t i = (static_cast<std::size_t>(b) * c + ch) * hw + s;
        xhat[i] = (xv[i] - mean) * r;
        out[i] = gv[ch] * xhat[i] + bv[ch];
      }
    }
  return detail::make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                                [xhat = std::move(xhat), rstd = std::move(rstd), n, c, hw](Node<T>& self) {
                                  const T* gv = self.parents[1]->data.data();
                                  T* gx = detail::grad_sink(self, 0);
                                  T* gg = detail::grad_sink(self, 1);
                                  T* gb = detail::grad_sink(self, 2);
                                  const T* go = self.grad.data();
                                  for (int b = 0; b < n; ++b)
                                    for (std::size_t s = 0; s < hw; ++s) {
                                      T m1 = T(0), m2 = T(0);
                                      for (int ch = 0; ch < c; ++ch) {
                                        const std::size_t i = (static_cast<std::size_t>(b) * c + ch) * hw + s;
                                        const T dxh = go[i] * gv[ch];
                                        m1 += dxh;
                                        m2 += dxh * xhat[i];
                                        if (gg) gg[ch] += go[i] * xhat[i];
                                        if (gb) gb[ch] += go[i];
                                      }
                                      if (!gx) continue;
                                      m1 /= static_cast<T>(c);
                                      m2 /= static_cast<T>(c);
                                      const T r = rstd[static_cast<std::size_t>(b) * hw + s];
                                      for (int ch = 0; ch < c; ++ch) {
                                        const std::size_t i = (static_cast<std::size_t>(b) * c + ch) * hw + s;
                                        gx[i] += r * (go[i] * gv[ch] - m1 - xhat[i] * m2);
                                      }
                                    }
                                });
}

}  // namespace fps
