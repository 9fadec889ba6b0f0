#pragma once

#include <algorithm>
#include <string>
#include <type_traits>
#include <vector>

#include "fps/core/gemm.hpp"
#include "fps/core/tensor.hpp"

namespace fps {

enum class Padding { zero, reflect };

struct ConvOptions {
  int stride = 1;
  int dilation = 1;
  int groups = 1;
  Padding padding = Padding::reflect;
};

namespace detail {

/// Mirror an out-of-range coordinate back into [0, n) without repeating the
/// edge sample, folding as often as needed when the overhang exceeds n.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

/// For each output position o and tap t along one axis, the input coordinate
/// read (or -1 for a zero-padded tap).
inline std::vector<int> tap_map(int in, int out, int k, int stride, int dilation, int pad, Padding mode) {
  std::vector<int> map(static_cast<std::size_t>(out) * k);
  for (int o = 0; o < out; ++o)
    for (int t = 0; t < k; ++t) {
      int i = o * stride - pad + t * dilation;
      if (i < 0 || i >= in) i = mode == Padding::reflect ? reflect_index(i, in) : -1;
      map[static_cast<std::size_t>(o) * k + t] = i;
    }
  return map;
}

struct ConvGeometry {
  int n, c_in, h, w, c_out, k, h_out, w_out, cin_g, cout_g, groups;
  std::vector<int> rows, cols;  // tap maps
  // Per column tap, the output range [lo, hi) that reads input columns
  // ox + shift without padding; only populated for stride 1.
  std::vector<int> lo, hi, shift;
};

inline void set_interior(ConvGeometry& g, int stride, int dilation, int pad) {
  if (stride != 1) return;
  for (int kx = 0; kx < g.k; ++kx) {
    const int sh = kx * dilation - pad;
    g.shift.push_back(sh);
    g.lo.push_back(std::clamp(-sh, 0, g.w_out));
    g.hi.push_back(std::clamp(g.w - sh, g.lo.back(), g.w_out));
  }
}

template <class T>
void im2col(const T* x, const ConvGeometry& g, int group, T* col) {
  const std::size_t p = static_cast<std::size_t>(g.h_out) * g.w_out;
  for (int ci = 0; ci < g.cin_g; ++ci) {
    const T* plane = x + static_cast<std::size_t>(group * g.cin_g + ci) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        T* dst = col + ((static_cast<std::size_t>(ci) * g.k + ky) * g.k + kx) * p;
        for (int oy = 0; oy < g.h_out; ++oy) {
          const int iy = g.rows[static_cast<std::size_t>(oy) * g.k + ky];
          T* d = dst + static_cast<std::size_t>(oy) * g.w_out;
          if (iy < 0) {
            for (int ox = 0; ox < g.w_out; ++ox) d[ox] = T(0);
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.w;
          const int* cm = &g.cols[kx];
          if (g.shift.empty()) {
            for (int ox = 0; ox < g.w_out; ++ox) {
              const int ix = cm[static_cast<std::size_t>(ox) * g.k];
              d[ox] = ix < 0 ? T(0) : src[ix];
            }
            continue;
          }
          const int lo = g.lo[kx], hi = g.hi[kx];
          for (int ox = 0; ox < lo; ++ox) {
            const int ix = cm[static_cast<std::size_t>(ox) * g.k];
            d[ox] = ix < 0 ? T(0) : src[ix];
          }
          std::copy(src + lo + g.shift[kx], src + hi + g.shift[kx], d + lo);
          for (int ox = hi; ox < g.w_out; ++ox) {
            const int ix = cm[static_cast<std::size_t>(ox) * g.k];
            d[ox] = ix < 0 ? T(0) : src[ix];
          }
        }
      }
  }
}

template <class T>
void col2im(const T* col, const ConvGeometry& g, int group, T* gx) {
  const std::size_t p = static_cast<std::size_t>(g.h_out) * g.w_out;
  for (int ci = 0; ci < g.cin_g; ++ci) {
    T* plane = gx + static_cast<std::size_t>(group * g.cin_g + ci) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const T* src = col + ((static_cast<std::size_t>(ci) * g.k + ky) * g.k + kx) * p;
        for (int oy = 0; oy < g.h_out; ++oy) {
          const int iy = g.rows[static_cast<std::size_t>(oy) * g.k + ky];
          if (iy < 0) continue;
          T* d = plane + static_cast<std::size_t>(iy) * g.w;
          const T* s = src + static_cast<std::size_t>(oy) * g.w_out;
          const int* cm = &g.cols[kx];
          const bool fast = !g.shift.empty();
          const int lo = fast ? g.lo[kx] : g.w_out, hi = fast ? g.hi[kx] : g.w_out;
          for (int ox = 0; ox < lo; ++ox) {
            const int ix = cm[static_cast<std::size_t>(ox) * g.k];
            if (ix >= 0) d[ix] += s[ox];
          }
          if (fast) {
            T* __restrict dd = d + g.shift[kx];
            for (int ox = lo; ox < hi; ++ox) dd[ox] += s[ox];
          }
          for (int ox = hi; ox < g.w_out; ++ox) {
            const int ix = cm[static_cast<std::size_t>(ox) * g.k];
            if (ix >= 0) d[ix] += s[ox];
          }
        }
      }
  }
}

/// Visits every (output column, input column) pair of column tap kx for a
/// stride-1 geometry: f(ox, ix) on the padded borders, and once with the
/// contiguous interior as interior(lo, hi, shift).
template <class Border, class Interior>
void visit_tap_columns(const ConvGeometry& g, int kx, Border&& border, Interior&& interior) {
  const int* cm = &g.cols[kx];
  const int lo = g.lo[kx], hi = g.hi[kx];
  for (int ox = 0; ox < lo; ++ox)
    if (const int ix = cm[static_cast<std::size_t>(ox) * g.k]; ix >= 0) border(ox, ix);
  interior(lo, hi, g.shift[kx]);
  for (int ox = hi; ox < g.w_out; ++ox)
    if (const int ix = cm[static_cast<std::size_t>(ox) * g.k]; ix >= 0) border(ox, ix);
}

/// Stride-1 depthwise convolution (one input and one output channel per
/// group) as a direct stencil; avoids a tiny matrix product per channel.
template <class T>
Tensor<T> depthwise_conv(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>* bias, ConvGeometry g) {
  const std::size_t in_hw = static_cast<std::size_t>(g.h) * g.w, out_hw = static_cast<std::size_t>(g.h_out) * g.w_out;
  const int kk = g.k * g.k;
  std::vector<T> out(static_cast<std::size_t>(g.n) * g.c_out * out_hw);
  for (int b = 0; b < g.n; ++b)
    for (int c = 0; c < g.c_in; ++c) {
      const T* xp = x.values().data() + (static_cast<std::size_t>(b) * g.c_in + c) * in_hw;
      T* op = out.data() + (static_cast<std::size_t>(b) * g.c_out + c) * out_hw;
      if (bias) std::fill(op, op + out_hw, bias->values()[c]);
      const T* wk = kernel.values().data() + static_cast<std::size_t>(c) * kk;
      for (int ky = 0; ky < g.k; ++ky)
        for (int oy = 0; oy < g.h_out; ++oy) {
          const int iy = g.rows[static_cast<std::size_t>(oy) * g.k + ky];
          if (iy < 0) continue;
          const T* src = xp + static_cast<std::size_t>(iy) * g.w;
          T* dst = op + static_cast<std::size_t>(oy) * g.w_out;
          for (int kx = 0; kx < g.k; ++kx) {
            const T wv = wk[ky * g.k + kx];
            visit_tap_columns(
                g, kx, [&](int ox, int ix) { dst[ox] += wv * src[ix]; },
                [&](int lo, int hi, int sh) {
                  T* __restrict d = dst;
                  const T* __restrict s = src + sh;
                  for (int ox = lo; ox < hi; ++ox) d[ox] += wv * s[ox];
                });
          }
        }
    }
  auto fn = [g = std::move(g), in_hw, out_hw, kk](Node<T>& self) {
    const T* xv = self.parents[0]->data.data();
    const T* wv_all = self.parents[1]->data.data();
    T* gx = grad_sink(self, 0);
    T* gw = grad_sink(self, 1);
    T* gb = self.parents.size() > 2 ? grad_sink(self, 2) : nullptr;
    for (int b = 0; b < g.n; ++b)
      for (int c = 0; c < g.c_in; ++c) {
        const T* xp = xv + (static_cast<std::size_t>(b) * g.c_in + c) * in_hw;
        const T* gp = self.grad.data() + (static_cast<std::size_t>(b) * g.c_out + c) * out_hw;
        T* gxp = gx ? gx + (static_cast<std::size_t>(b) * g.c_in + c) * in_hw : nullptr;
        const T* wk = wv_all + static_cast<std::size_t>(c) * kk;
        if (gb) {
          T s = T(0);
          for (std::size_t i = 0; i < out_hw; ++i) s += gp[i];
          gb[c] += s;
        }
        for (int ky = 0; ky < g.k; ++ky)
          for (int oy = 0; oy < g.h_out; ++oy) {
            const int iy = g.rows[static_cast<std::size_t>(oy) * g.k + ky];
            if (iy < 0) continue;
            const T* src = xp + static_cast<std::size_t>(iy) * g.w;
            const T* go = gp + static_cast<std::size_t>(oy) * g.w_out;
            T* gsrc = gxp ? gxp + static_cast<std::size_t>(iy) * g.w : nullptr;
            for (int kx = 0; kx < g.k; ++kx) {
              const T wv = wk[ky * g.k + kx];
              T acc = T(0);
              visit_tap_columns(
                  g, kx,
                  [&](int ox, int ix) {
                    acc += go[ox] * src[ix];
                    if (gsrc) gsrc[ix] += wv * go[ox];
                  },
                  [&](int lo, int hi, int sh) {
                    const T* __restrict s = src + sh;
                    T a = T(0);
                    for (int ox = lo; ox < hi; ++ox) a += go[ox] * s[ox];
                    acc += a;
                    if (gsrc) {
                      T* __restrict d = gsrc + sh;
                      for (int ox = lo; ox < hi; ++ox) d[ox] += wv * go[ox];
                    }
                  });
              if (gw) gw[static_cast<std::size_t>(c) * kk + ky * g.k + kx] += acc;
            }
          }
      }
  };
  Shape shape{g.n, g.c_out, g.h_out, g.w_out};
  if (bias) return make_result<T>(std::move(shape), std::move(out), {x, kernel, *bias}, std::move(fn));
  return make_result<T>(std::move(shape), std::move(out), {x, kernel}, std::move(fn));
}

}  // namespace detail

/// 2-D convolution (cross-correlation) of an [N, C_in, H, W] input with a
/// [C_out, C_in/groups, k, k] kernel. Padding is always "same" style:
/// pad = dilation*(k-1)/2, so the output extent per axis is
/// floor((H + 2*pad - dilation*(k-1) - 1)/stride) + 1.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const std::type_identity_t<Tensor<T>>* bias = nullptr,
                 const ConvOptions& opt = {}) {
  require_rank(x, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  detail::ConvGeometry g{};
  g.n = x.dim(0);
  g.c_in = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.c_out = kernel.dim(0);
  g.k = kernel.dim(2);
  g.groups = opt.groups;
  if (opt.groups <= 0 || g.c_in % opt.groups != 0)
    throw ShapeError("conv2d: input channels " + std::to_string(g.c_in) + " not divisible by groups " +
                     std::to_string(opt.groups));
  if (g.c_out % opt.groups != 0)
    throw ShapeError("conv2d: output channels " + std::to_string(g.c_out) + " not divisible by groups " +
                     std::to_string(opt.groups));
  g.cin_g = g.c_in / opt.groups;
  g.cout_g = g.c_out / opt.groups;
  if (kernel.dim(1) != g.cin_g)
    throw ShapeError("conv2d: kernel input-channel dimension is " + std::to_string(kernel.dim(1)) + ", expected " +
                     std::to_string(g.cin_g));
  if (kernel.dim(3) != g.k) throw ShapeError("conv2d: kernel height and width differ");
  if (g.k % 2 == 0) throw ShapeError("conv2d: kernel extent " + std::to_string(g.k) + " must be odd");
  if (opt.stride <= 0 || opt.dilation <= 0) throw ShapeError("conv2d: stride and dilation must be positive");
  if (bias) require_shape(*bias, {g.c_out}, "conv2d bias");
  const int pad = opt.dilation * (g.k - 1) / 2;
  g.h_out = (g.h + 2 * pad - opt.dilation * (g.k - 1) - 1) / opt.stride + 1;
  g.w_out = (g.w + 2 * pad - opt.dilation * (g.k - 1) - 1) / opt.stride + 1;
  if (g.h_out <= 0 || g.w_out <= 0) throw ShapeError("conv2d: empty output");
  g.rows = detail::tap_map(g.h, g.h_out, g.k, opt.stride, opt.dilation, pad, opt.padding);
  g.cols = detail::tap_map(g.w, g.w_out, g.k, opt.stride, opt.dilation, pad, opt.padding);
  detail::set_interior(g, opt.stride, opt.dilation, pad);
  if (g.cin_g == 1 && g.cout_g == 1 && opt.stride == 1) return detail::depthwise_conv(x, kernel, bias, std::move(g));

  const std::size_t p = static_cast<std::size_t>(g.h_out) * g.w_out;
  const int kc = g.cin_g * g.k * g.k;
  const bool direct = g.k == 1 && opt.stride == 1;  // input plane is its own column matrix
  const std::size_t in_plane = static_cast<std::size_t>(g.c_in) * g.h * g.w;
  const std::size_t out_plane = static_cast<std::size_t>(g.c_out) * p;

  std::vector<T> out(static_cast<std::size_t>(g.n) * out_plane);
  std::vector<T> col(direct ? 0 : static_cast<std::size_t>(kc) * p);
  const T* xv = x.values().data();
  const T* wv = kernel.values().data();
  for (int b = 0; b < g.n; ++b)
    for (int grp = 0; grp < g.groups; ++grp) {
      const T* cm;
      if (direct) {
        cm = xv + b * in_plane + static_cast<std::size_t>(grp) * g.cin_g * p;
      } else {
        detail::im2col(xv + b * in_plane, g, grp, col.data());
        cm = col.data();
      }
      T* o = out.data() + b * out_plane + static_cast<std::size_t>(grp) * g.cout_g * p;
      detail::gemm(false, false, g.cout_g, static_cast<int>(p), kc, wv + static_cast<std::size_t>(grp) * g.cout_g * kc,
                   cm, o, false);
      if (bias)
        for (int oc = 0; oc < g.cout_g; ++oc) {
          const T bv = bias->values()[grp * g.cout_g + oc];
          T* orow = o + static_cast<std::size_t>(oc) * p;
          for (std::size_t i = 0; i < p; ++i) orow[i] += bv;
        }
    }

  auto fn = [g = std::move(g), p, kc, direct, in_plane, out_plane](Node<T>& self) {
    const T* xv = self.parents[0]->data.data();
    const T* wv = self.parents[1]->data.data();
    T* gx = detail::grad_sink(self, 0);
    T* gw = detail::grad_sink(self, 1);
    T* gb = self.parents.size() > 2 ? detail::grad_sink(self, 2) : nullptr;
    std::vector<T> col(direct ? 0 : static_cast<std::size_t>(kc) * p);
    std::vector<T> dcol(direct || !gx ? 0 : static_cast<std::size_t>(kc) * p);
    for (int b = 0; b < g.n; ++b)
      for (int grp = 0; grp < g.groups; ++grp) {
        const T* go = self.grad.data() + b * out_plane + static_cast<std::size_t>(grp) * g.cout_g * p;
        const T* wg = wv + static_cast<std::size_t>(grp) * g.cout_g * kc;
        if (gw) {
          const T* cm;
          if (direct) {
            cm = xv + b * in_plane + static_cast<std::size_t>(grp) * g.cin_g * p;
          } else {
            detail::im2col(xv + b * in_plane, g, grp, col.data());
            cm = col.data();
          }
          detail::gemm(false, true, g.cout_g, kc, static_cast<int>(p), go, cm,
                       gw + static_cast<std::size_t>(grp) * g.cout_g * kc, true);
        }
        if (gx) {
          if (direct) {
            detail::gemm(true, false, kc, static_cast<int>(p), g.cout_g, wg, go,
                         gx + b * in_plane + static_cast<std::size_t>(grp) * g.cin_g * p, true);
          } else {
            detail::gemm(true, false, kc, static_cast<int>(p), g.cout_g, wg, go, dcol.data(), false);
            detail::col2im(dcol.data(), g, grp, gx + b * in_plane);
          }
        }
        if (gb)
          for (int oc = 0; oc < g.cout_g; ++oc) {
            T s = T(0);
            const T* row = go + static_cast<std::size_t>(oc) * p;
            for (std::size_t i = 0; i < p; ++i) s += row[i];
            gb[grp * g.cout_g + oc] += s;
          }
      }
  };
  Shape shape{g.n, g.c_out, g.h_out, g.w_out};
  if (bias) return detail::make_result<T>(std::move(shape), std::move(out), {x, kernel, *bias}, std::move(fn));
  return detail::make_result<T>(std::move(shape), std::move(out), {x, kernel}, std::move(fn));
}

/// Same-size depthwise filtering of every channel with one separable kernel
/// (`taps` applied along rows, then along columns), reflect padded. The taps
/// are constants; only the input receives a gradient.
template <class T>
Tensor<T> separable_filter(const Tensor<T>& x, std::vector<double> taps) {
  require_rank(x, 4, "separable_filter");
  const int k = static_cast<int>(taps.size());
  if (k % 2 == 0) throw ShapeError("separable_filter: tap count must be odd");
  const int h = x.dim(2), w = x.dim(3);
  const std::size_t planes = static_cast<std::size_t>(x.dim(0)) * x.dim(1);
  const int r = k / 2;
  const auto rows = detail::tap_map(h, h, k, 1, 1, r, Padding::reflect);
  const auto cols = detail::tap_map(w, w, k, 1, 1, r, Padding::reflect);
  std::vector<T> tk(taps.begin(), taps.end());

  auto apply = [=](const T* in, T* out, std::vector<T>& tmp) {
    for (std::size_t pl = 0; pl < planes; ++pl) {
      const T* src = in + pl * h * w;
      T* dst = out + pl * h * w;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          T s = T(0);
          const int* cm = &cols[static_cast<std::size_t>(xx) * k];
          for (int t = 0; t < k; ++t) s += tk[t] * src[static_cast<std::size_t>(y) * w + cm[t]];
          tmp[static_cast<std::size_t>(y) * w + xx] = s;
        }
      for (int y = 0; y < h; ++y) {
        const int* rm = &rows[static_cast<std::size_t>(y) * k];
        for (int xx = 0; xx < w; ++xx) {
          T s = T(0);
          for (int t = 0; t < k; ++t) s += tk[t] * tmp[static_cast<std::size_t>(rm[t]) * w + xx];
          dst[static_cast<std::size_t>(y) * w + xx] = s;
        }
      }
    }
  };

  std::vector<T> out(x.numel());
  std::vector<T> tmp(static_cast<std::size_t>(h) * w);
  apply(x.values().data(), out.data(), tmp);
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [=](Node<T>& self) {
    // Adjoint: scatter through the column pass, then through the row pass.
    T* gx = detail::grad_sink(self, 0);
    std::vector<T> tmp(static_cast<std::size_t>(h) * w);
    for (std::size_t pl = 0; pl < planes; ++pl) {
      const T* go = self.grad.data() + pl * h * w;
      std::fill(tmp.begin(), tmp.end(), T(0));
      for (int y = 0; y < h; ++y) {
        const int* rm = &rows[static_cast<std::size_t>(y) * k];
        for (int xx = 0; xx < w; ++xx) {
          const T gv = go[static_cast<std::size_t>(y) * w + xx];
          for (int t = 0; t < k; ++t) tmp[static_cast<std::size_t>(rm[t]) * w + xx] += tk[t] * gv;
        }
      }
      T* dst = gx + pl * h * w;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const T gv = tmp[static_cast<std::size_t>(y) * w + xx];
          const int* cm = &cols[static_cast<std::size_t>(xx) * k];
          for (int t = 0; t < k; ++t) dst[static_cast<std::size_t>(y) * w + cm[t]] += tk[t] * gv;
        }
    }
  });
}

/// 3x3 mean filter, stride 1, reflect padded, same size.
template <class T>
Tensor<T> avg_pool3(const Tensor<T>& x) {
  return separable_filter(x, {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0});
}

}  // namespace fps
