#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "fps/core/gemm.hpp"
#include "fps/core/tensor.hpp"

namespace fps {

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(b, a.shape(), "add");
  std::vector<T> out(a.numel());
  const auto& x = a.values();
  const auto& y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (T* g = detail::grad_sink(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(b, a.shape(), "sub");
  std::vector<T> out(a.numel());
  const auto& x = a.values();
  const auto& y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    if (T* g = detail::grad_sink(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (T* g = detail::grad_sink(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(b, a.shape(), "mul");
  std::vector<T> out(a.numel());
  const auto& x = a.values();
  const auto& y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& x = self.parents[0]->data;
    const auto& y = self.parents[1]->data;
    if (T* g = detail::grad_sink(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    if (T* g = detail::grad_sink(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= s;
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.values());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    const auto& x = self.parents[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (x[i] > T(0)) g[i] += self.grad[i];
  });
}

/// Sum of all entries, as a scalar tensor.
template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  return detail::make_result<T>({1}, {s}, {a}, [](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    const T go = self.grad[0];
    for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) g[i] += go;
  });
}

/// Scalar sum_i w_i * a_i against a fixed weight vector.
template <class T>
Tensor<T> dot_const(const Tensor<T>& a, std::vector<T> w) {
  if (w.size() != a.numel()) throw ShapeError("dot_const: weight length mismatch");
  T s = T(0);
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * a.values()[i];
  return detail::make_result<T>({1}, {s}, {a}, [w = std::move(w)](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    for (std::size_t i = 0; i < w.size(); ++i) g[i] += self.grad[0] * w[i];
  });
}

// ----------------------------------------------------------------- structure

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return detail::make_result<T>(std::move(shape), a.values(), {a}, [](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

/// Concatenate rank-4 tensors along the channel axis.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const int n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  int c_total = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    require_rank(p, 4, "concat_channels");
    if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w)
      throw ShapeError("concat_channels: batch/spatial mismatch " + shape_str(p.shape()) + " vs " +
                       shape_str(parts[0].shape()));
    offsets.push_back(c_total);
    c_total += p.dim(1);
  }
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(n) * c_total * hw);
  for (int b = 0; b < n; ++b)
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const int c = parts[k].dim(1);
      const T* src = parts[k].values().data() + static_cast<std::size_t>(b) * c * hw;
      std::copy(src, src + c * hw, out.data() + (static_cast<std::size_t>(b) * c_total + offsets[k]) * hw);
    }
  return detail::make_result_n<T>({n, c_total, h, w}, std::move(out), parts,
                                  [offsets, c_total, n, hw](Node<T>& self) {
                                    for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                      T* g = detail::grad_sink(self, k);
                                      if (!g) continue;
                                      const int c = self.parents[k]->shape[1];
                                      for (int b = 0; b < n; ++b) {
                                        const T* src = self.grad.data() + (static_cast<std::size_t>(b) * c_total + offsets[k]) * hw;
                                        T* dst = g + static_cast<std::size_t>(b) * c * hw;
                                        for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
                                      }
                                    }
                                  });
}

/// Channels [start, start+count) of a rank-4 tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& a, int start, int count) {
  require_rank(a, 4, "slice_channels");
  const int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  if (start < 0 || count <= 0 || start + count > c) throw ShapeError("slice_channels: range outside channel axis");
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(n) * count * hw);
  for (int b = 0; b < n; ++b) {
    const T* src = a.values().data() + (static_cast<std::size_t>(b) * c + start) * hw;
    std::copy(src, src + count * hw, out.data() + static_cast<std::size_t>(b) * count * hw);
  }
  return detail::make_result<T>({n, count, h, w}, std::move(out), {a}, [=](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    for (int b = 0; b < n; ++b) {
      const T* src = self.grad.data() + static_cast<std::size_t>(b) * count * hw;
      T* dst = g + (static_cast<std::size_t>(b) * c + start) * hw;
      for (std::size_t i = 0; i < count * hw; ++i) dst[i] += src[i];
    }
  });
}

namespace detail {

/// out[b, j, i] = in[b, i, j] for a batch of [rows, cols] matrices.
template <class T>
void transpose_batched(const T* in, T* out, int batch, int rows, int cols, bool accumulate) {
  for (int b = 0; b < batch; ++b) {
    const T* src = in + static_cast<std::size_t>(b) * rows * cols;
    T* dst = out + static_cast<std::size_t>(b) * rows * cols;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) {
        T& d = dst[static_cast<std::size_t>(j) * rows + i];
        d = accumulate ? d + src[static_cast<std::size_t>(i) * cols + j] : src[static_cast<std::size_t>(i) * cols + j];
      }
  }
}

}  // namespace detail

/// [N,C,H,W] feature map -> [N,J,C] token matrix, J = H*W row-major.
template <class T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  require_rank(x, 4, "to_tokens");
  const int n = x.dim(0), c = x.dim(1), j = x.dim(2) * x.dim(3);
  std::vector<T> out(x.numel());
  detail::transpose_batched(x.values().data(), out.data(), n, c, j, false);
  return detail::make_result<T>({n, j, c}, std::move(out), {x}, [n, c, j](Node<T>& self) {
    detail::transpose_batched(self.grad.data(), detail::grad_sink(self, 0), n, j, c, true);
  });
}

/// Inverse of to_tokens.
template <class T>
Tensor<T> from_tokens(const Tensor<T>& t, int h, int w) {
  require_rank(t, 3, "from_tokens");
  const int n = t.dim(0), j = t.dim(1), c = t.dim(2);
  if (j != h * w) throw ShapeError("from_tokens: token count " + std::to_string(j) + " != H*W");
  std::vector<T> out(t.numel());
  detail::transpose_batched(t.values().data(), out.data(), n, j, c, false);
  return detail::make_result<T>({n, c, h, w}, std::move(out), {t}, [n, c, j](Node<T>& self) {
    detail::transpose_batched(self.grad.data(), detail::grad_sink(self, 0), n, c, j, true);
  });
}

/// [B, J, I*d] -> [B*I, J, d].
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, int heads) {
  require_rank(x, 3, "split_heads");
  const int b = x.dim(0), j = x.dim(1), c = x.dim(2);
  if (heads <= 0 || c % heads != 0)
    throw ShapeError("split_heads: channel count " + std::to_string(c) + " not divisible by heads " + std::to_string(heads));
  const int d = c / heads;
  std::vector<T> out(x.numel());
  const T* src = x.values().data();
  for (int bb = 0; bb < b; ++bb)
    for (int t = 0; t < j; ++t)
      for (int i = 0; i < heads; ++i)
        std::copy_n(src + (static_cast<std::size_t>(bb) * j + t) * c + i * d, d,
                    out.data() + ((static_cast<std::size_t>(bb) * heads + i) * j + t) * d);
  return detail::make_result<T>({b * heads, j, d}, std::move(out), {x}, [=](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    for (int bb = 0; bb < b; ++bb)
      for (int t = 0; t < j; ++t)
        for (int i = 0; i < heads; ++i) {
          const T* s = self.grad.data() + ((static_cast<std::size_t>(bb) * heads + i) * j + t) * d;
          T* dst = g + (static_cast<std::size_t>(bb) * j + t) * c + i * d;
          for (int e = 0; e < d; ++e) dst[e] += s[e];
        }
  });
}

/// [B*I, J, d] -> [B, J, I*d].
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x, int heads) {
  require_rank(x, 3, "merge_heads");
  if (heads <= 0 || x.dim(0) % heads != 0) throw ShapeError("merge_heads: batch not divisible by heads");
  const int b = x.dim(0) / heads, j = x.dim(1), d = x.dim(2), c = d * heads;
  std::vector<T> out(x.numel());
  const T* src = x.values().data();
  for (int bb = 0; bb < b; ++bb)
    for (int i = 0; i < heads; ++i)
      for (int t = 0; t < j; ++t)
        std::copy_n(src + ((static_cast<std::size_t>(bb) * heads + i) * j + t) * d, d,
                    out.data() + (static_cast<std::size_t>(bb) * j + t) * c + i * d);
  return detail::make_result<T>({b, j, c}, std::move(out), {x}, [=](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    for (int bb = 0; bb < b; ++bb)
      for (int i = 0; i < heads; ++i)
        for (int t = 0; t < j; ++t) {
          const T* s = self.grad.data() + (static_cast<std::size_t>(bb) * j + t) * c + i * d;
          T* dst = g + ((static_cast<std::size_t>(bb) * heads + i) * j + t) * d;
          for (int e = 0; e < d; ++e) dst[e] += s[e];
        }
  });
}

/// [B*G, m, n] -> [B, m, n], summing each run of G consecutive matrices.
template <class T>
Tensor<T> sum_groups(const Tensor<T>& x, int group) {
  require_rank(x, 3, "sum_groups");
  if (group <= 0 || x.dim(0) % group != 0) throw ShapeError("sum_groups: batch not divisible by group");
  const int b = x.dim(0) / group;
  const std::size_t mat = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  std::vector<T> out(static_cast<std::size_t>(b) * mat, T(0));
  const T* src = x.values().data();
  for (int bb = 0; bb < b; ++bb)
    for (int gi = 0; gi < group; ++gi) {
      const T* s = src + (static_cast<std::size_t>(bb) * group + gi) * mat;
      T* d = out.data() + static_cast<std::size_t>(bb) * mat;
      for (std::size_t i = 0; i < mat; ++i) d[i] += s[i];
    }
  return detail::make_result<T>({b, x.dim(1), x.dim(2)}, std::move(out), {x}, [=](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    for (int bb = 0; bb < b; ++bb)
      for (int gi = 0; gi < group; ++gi) {
        const T* s = self.grad.data() + static_cast<std::size_t>(bb) * mat;
        T* d = g + (static_cast<std::size_t>(bb) * group + gi) * mat;
        for (std::size_t i = 0; i < mat; ++i) d[i] += s[i];
      }
  });
}

// ----------------------------------------------------------------- products

/// Rank-2 product [m,k] x [k,n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimension mismatch, lhs has " + std::to_string(k) + " columns, rhs has " +
                     std::to_string(b.dim(0)) + " rows");
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  detail::gemm(false, false, m, n, k, a.values().data(), b.values().data(), out.data(), false);
  return detail::make_result<T>({m, n}, std::move(out), {a, b}, [m, n, k](Node<T>& self) {
    if (T* g = detail::grad_sink(self, 0))
      detail::gemm(false, true, m, k, n, self.grad.data(), self.parents[1]->data.data(), g, true);
    if (T* g = detail::grad_sink(self, 1))
      detail::gemm(true, false, k, n, m, self.parents[0]->data.data(), self.grad.data(), g, true);
  });
}

/// Batched product [B,m,k] x [B,k,n] (or [B,n,k] when trans_b). These are
/// the attention cores, so their multiply-accumulates are counted.
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  require_rank(a, 3, "bmm lhs");
  require_rank(b, 3, "bmm rhs");
  const int batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const int n = trans_b ? b.dim(1) : b.dim(2);
  const int bk = trans_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch) throw ShapeError("bmm: batch mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (bk != k) throw ShapeError("bmm: inner dimension mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(batch) * m * n);
  const std::size_t sa = static_cast<std::size_t>(m) * k, sb = static_cast<std::size_t>(k) * n,
                    sc = static_cast<std::size_t>(m) * n;
  for (int i = 0; i < batch; ++i)
    detail::gemm(false, trans_b, m, n, k, a.values().data() + i * sa, b.values().data() + i * sb, out.data() + i * sc,
                 false);
  detail::attention_mac_counter() += static_cast<std::uint64_t>(batch) * m * n * k;
  return detail::make_result<T>({batch, m, n}, std::move(out), {a, b}, [=](Node<T>& self) {
    const T* av = self.parents[0]->data.data();
    const T* bv = self.parents[1]->data.data();
    T* ga = detail::grad_sink(self, 0);
    T* gb = detail::grad_sink(self, 1);
    for (int i = 0; i < batch; ++i) {
      const T* go = self.grad.data() + i * sc;
      // dA = dC * op(B)^T
      if (ga) detail::gemm(false, !trans_b, m, k, n, go, bv + i * sb, ga + i * sa, true);
      if (gb) {
        if (trans_b)  // B stored [n,k]: dB = dC^T A
          detail::gemm(true, false, n, k, m, go, av + i * sa, gb + i * sb, true);
        else  // dB = A^T dC
          detail::gemm(true, false, k, n, m, av + i * sa, go, gb + i * sb, true);
      }
    }
  });
}

/// y = x W^T (+ bias) over the last axis; W stored [out, in].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias = nullptr) {
  require_rank(w, 2, "linear weight");
  const int in = w.dim(1), outc = w.dim(0);
  if (x.dim(-1) != in)
    throw ShapeError("linear: input feature size " + std::to_string(x.dim(-1)) + " != weight input size " +
                     std::to_string(in));
  if (bias) require_shape(*bias, {outc}, "linear bias");
  const int rows = static_cast<int>(x.numel() / in);
  Shape shape = x.shape();
  shape.back() = outc;
  std::vector<T> out(static_cast<std::size_t>(rows) * outc);
  detail::gemm(false, true, rows, outc, in, x.values().data(), w.values().data(), out.data(), false);
  if (bias)
    for (int r = 0; r < rows; ++r)
      for (int o = 0; o < outc; ++o) out[static_cast<std::size_t>(r) * outc + o] += bias->values()[o];
  auto fn = [rows, in, outc](Node<T>& self) {
    if (T* g = detail::grad_sink(self, 0))
      detail::gemm(false, false, rows, in, outc, self.grad.data(), self.parents[1]->data.data(), g, true);
    if (T* g = detail::grad_sink(self, 1))
      detail::gemm(true, false, outc, in, rows, self.grad.data(), self.parents[0]->data.data(), g, true);
    if (self.parents.size() > 2)
      if (T* g = detail::grad_sink(self, 2))
        for (int r = 0; r < rows; ++r)
          for (int o = 0; o < outc; ++o) g[o] += self.grad[static_cast<std::size_t>(r) * outc + o];
  };
  if (bias) return detail::make_result<T>(std::move(shape), std::move(out), {x, w, *bias}, fn);
  return detail::make_result<T>(std::move(shape), std::move(out), {x, w}, fn);
}

// ------------------------------------------------------------------ softmax

/// Softmax along the last axis in max-subtracted form. Entries equal to -inf
/// are excluded; a row that is entirely -inf yields zeros.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const int cols = x.dim(-1);
  const std::size_t rows = x.numel() / cols;
  std::vector<T> out(x.numel());
  const T* src = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = src + r * cols;
    T* o = out.data() + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < cols; ++c) mx = std::max(mx, in[c]);
    if (mx == -std::numeric_limits<T>::infinity()) {
      std::fill(o, o + cols, T(0));
      continue;
    }
    T s = T(0);
    for (int c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      s += o[c];
    }
    const T inv = T(1) / s;
    for (int c = 0; c < cols; ++c) o[c] *= inv;
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [rows, cols](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    // Softmax backward needs only its own output.
    const T* y = self.data.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = y + r * cols;
      const T* gr = self.grad.data() + r * cols;
      T dot = T(0);
      for (int c = 0; c < cols; ++c) dot += yr[c] * gr[c];
      T* gi = g + r * cols;
      for (int c = 0; c < cols; ++c) gi[c] += yr[c] * (gr[c] - dot);
    }
  });
}

namespace detail {

/// In-place softmax of each row of a [rows, cols] block, skipping -inf.
template <class T>
void softmax_rows(T* x, std::size_t rows, int cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = x + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < cols; ++c) mx = std::max(mx, o[c]);
    if (mx == -std::numeric_limits<T>::infinity()) {
      std::fill(o, o + cols, T(0));
      continue;
    }
    T s = T(0);
    for (int c = 0; c < cols; ++c) {
      o[c] = std::exp(o[c] - mx);
      s += o[c];
    }
    const T inv = T(1) / s;
    for (int c = 0; c < cols; ++c) o[c] *= inv;
  }
}

}  // namespace detail

/// P = softmax(scale * Q K^T) for batches of queries [B, m, d] and keys
/// [B, n, d], computed as one node so the logits never enter the graph.
/// key_pad, when given, holds B*n flags; flagged keys get zero weight.
template <class T>
Tensor<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k, T scale, const std::vector<char>* key_pad = nullptr) {
  require_rank(q, 3, "attention_probs queries");
  require_rank(k, 3, "attention_probs keys");
  const int batch = q.dim(0), m = q.dim(1), d = q.dim(2), n = k.dim(1);
  if (k.dim(0) != batch || k.dim(2) != d)
    throw ShapeError("attention_probs: keys " + shape_str(k.shape()) + " do not match queries " + shape_str(q.shape()));
  if (key_pad && key_pad->size() != static_cast<std::size_t>(batch) * n)
    throw ShapeError("attention_probs: pad flags do not match keys");
  const std::size_t mn = static_cast<std::size_t>(m) * n, md = static_cast<std::size_t>(m) * d,
                    nd = static_cast<std::size_t>(n) * d;
  std::vector<T> out(static_cast<std::size_t>(batch) * mn);
  for (int b = 0; b < batch; ++b) {
    T* o = out.data() + b * mn;
    detail::gemm(false, true, m, n, d, q.values().data() + b * md, k.values().data() + b * nd, o, false);
    for (std::size_t i = 0; i < mn; ++i) o[i] *= scale;
    if (key_pad)
      for (int key = 0; key < n; ++key)
        if ((*key_pad)[static_cast<std::size_t>(b) * n + key])
          for (int row = 0; row < m; ++row) o[static_cast<std::size_t>(row) * n + key] = -std::numeric_limits<T>::infinity();
    detail::softmax_rows(o, m, n);
  }
  detail::attention_mac_counter() += static_cast<std::uint64_t>(batch) * m * n * d;
  return detail::make_result<T>({batch, m, n}, std::move(out), {q, k}, [=](Node<T>& self) {
    T* gq = detail::grad_sink(self, 0);
    T* gk = detail::grad_sink(self, 1);
    const T* qv = self.parents[0]->data.data();
    const T* kv = self.parents[1]->data.data();
    std::vector<T> dl(mn);
    for (int b = 0; b < batch; ++b) {
      const T* p = self.data.data() + b * mn;
      const T* gp = self.grad.data() + b * mn;
      for (int row = 0; row < m; ++row) {
        const T* pr = p + static_cast<std::size_t>(row) * n;
        const T* gr = gp + static_cast<std::size_t>(row) * n;
        T dot = T(0);
        for (int c = 0; c < n; ++c) dot += pr[c] * gr[c];
        T* dr = dl.data() + static_cast<std::size_t>(row) * n;
        for (int c = 0; c < n; ++c) dr[c] = scale * pr[c] * (gr[c] - dot);
      }
      if (gq) detail::gemm(false, false, m, d, n, dl.data(), kv + b * nd, gq + b * md, true);
      if (gk) detail::gemm(true, false, n, d, m, dl.data(), qv + b * md, gk + b * nd, true);
    }
  });
}

/// Sum of several [B*I, m, n] stacks over the stacks and over each run of I
/// consecutive matrices: result [B, m, n].
template <class T>
Tensor<T> sum_heads(const std::vector<Tensor<T>>& parts, int heads) {
  if (parts.empty()) throw ShapeError("sum_heads: no parts");
  for (const auto& p : parts) {
    require_shape(p, parts[0].shape(), "sum_heads part");
  }
  require_rank(parts[0], 3, "sum_heads");
  if (heads <= 0 || parts[0].dim(0) % heads != 0) throw ShapeError("sum_heads: batch not divisible by heads");
  const int b = parts[0].dim(0) / heads;
  const std::size_t mat = static_cast<std::size_t>(parts[0].dim(1)) * parts[0].dim(2);
  std::vector<T> out(static_cast<std::size_t>(b) * mat, T(0));
  for (const auto& p : parts)
    for (int bb = 0; bb < b; ++bb)
      for (int i = 0; i < heads; ++i) {
        const T* s = p.values().data() + (static_cast<std::size_t>(bb) * heads + i) * mat;
        T* d = out.data() + static_cast<std::size_t>(bb) * mat;
        for (std::size_t e = 0; e < mat; ++e) d[e] += s[e];
      }
  const std::size_t count = parts.size();
  return detail::make_result_n<T>({b, parts[0].dim(1), parts[0].dim(2)}, std::move(out), parts, [=](Node<T>& self) {
    for (std::size_t t = 0; t < count; ++t) {
      T* g = detail::grad_sink(self, t);
      if (!g) continue;
      for (int bb = 0; bb < b; ++bb)
        for (int i = 0; i < heads; ++i) {
          const T* s = self.grad.data() + static_cast<std::size_t>(bb) * mat;
          T* d = g + (static_cast<std::size_t>(bb) * heads + i) * mat;
          for (std::size_t e = 0; e < mat; ++e) d[e] += s[e];
        }
    }
  });
}

// ---------------------------------------------------------------- reductions

/// Per-(n,c) spatial mean of a rank-4 tensor: [N,C,H,W] -> [N,C].
template <class T>
Tensor<T> mean_hw(const Tensor<T>& x) {
  require_rank(x, 4, "mean_hw");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(n) * c);
  for (std::size_t i = 0; i < out.size(); ++i) {
    T s = T(0);
    const T* p = x.values().data() + i * hw;
    for (std::size_t k = 0; k < hw; ++k) s += p[k];
    out[i] = s / static_cast<T>(hw);
  }
  return detail::make_result<T>({n, c}, std::move(out), {x}, [hw](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = self.grad[i] / static_cast<T>(hw);
      for (std::size_t k = 0; k < hw; ++k) g[i * hw + k] += v;
    }
  });
}

/// sum_e coeffs[n,e] * parts[e][n,...]; every part shares one shape.
template <class T>
Tensor<T> weighted_combination(const std::vector<Tensor<T>>& parts, const Tensor<T>& coeffs) {
  if (parts.empty()) throw ShapeError("weighted_combination: no parts");
  const int e_count = static_cast<int>(parts.size());
  require_rank(coeffs, 2, "weighted_combination coefficients");
  const int n = parts[0].dim(0);
  if (coeffs.dim(0) != n || coeffs.dim(1) != e_count)
    throw ShapeError("weighted_combination: coefficients " + shape_str(coeffs.shape()) + " do not match " +
                     std::to_string(e_count) + " parts of batch " + std::to_string(n));
  for (const auto& p : parts) require_shape(p, parts[0].shape(), "weighted_combination part");
  const std::size_t per = parts[0].numel() / n;
  std::vector<T> out(parts[0].numel(), T(0));
  for (int e = 0; e < e_count; ++e)
    for (int b = 0; b < n; ++b) {
      const T c = coeffs.values()[static_cast<std::size_t>(b) * e_count + e];
      const T* s = parts[e].values().data() + b * per;
      T* d = out.data() + b * per;
      for (std::size_t i = 0; i < per; ++i) d[i] += c * s[i];
    }
  std::vector<Tensor<T>> all(parts);
  all.push_back(coeffs);
  return detail::make_result_n<T>(parts[0].shape(), std::move(out), all, [=](Node<T>& self) {
    const auto& cv = self.parents.back()->data;
    T* gc = detail::grad_sink(self, static_cast<std::size_t>(e_count));
    for (int e = 0; e < e_count; ++e) {
      T* gp = detail::grad_sink(self, static_cast<std::size_t>(e));
      const auto& pv = self.parents[e]->data;
      for (int b = 0; b < n; ++b) {
        const T* go = self.grad.data() + b * per;
        if (gp) {
          const T c = cv[static_cast<std::size_t>(b) * e_count + e];
          for (std::size_t i = 0; i < per; ++i) gp[b * per + i] += c * go[i];
        }
        if (gc) {
          T s = T(0);
          for (std::size_t i = 0; i < per; ++i) s += go[i] * pv[b * per + i];
          gc[static_cast<std::size_t>(b) * e_count + e] += s;
        }
      }
    }
  });
}

// ------------------------------------------------------------ gather/scatter

/// Rows of a [R, C] tensor picked by index; index -1 produces a zero row.
/// The backward pass scatters (adds) into the picked rows.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::int64_t> index) {
  require_rank(x, 2, "gather_rows");
  const std::int64_t rows = x.dim(0);
  const int c = x.dim(1);
  std::vector<T> out(index.size() * c, T(0));
  for (std::size_t i = 0; i < index.size(); ++i) {
    const std::int64_t r = index[i];
    if (r < -1 || r >= rows) throw ShapeError("gather_rows: index " + std::to_string(r) + " out of range");
    if (r >= 0) std::copy_n(x.values().data() + r * c, c, out.data() + i * c);
  }
  const int out_rows = static_cast<int>(index.size());
  return detail::make_result<T>({out_rows, c}, std::move(out), {x}, [index = std::move(index), c](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] < 0) continue;
      const T* s = self.grad.data() + i * c;
      T* d = g + index[i] * c;
      for (int k = 0; k < c; ++k) d[k] += s[k];
    }
  });
}

/// Inverse routing of gather_rows: out[index[i]] += x[i] into `rows` rows.
template <class T>
Tensor<T> scatter_rows(const Tensor<T>& x, const std::vector<std::int64_t>& index, int rows) {
  require_rank(x, 2, "scatter_rows");
  if (index.size() != static_cast<std::size_t>(x.dim(0))) throw ShapeError("scatter_rows: index length mismatch");
  const int c = x.dim(1);
  std::vector<T> out(static_cast<std::size_t>(rows) * c, T(0));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < -1 || index[i] >= rows) throw ShapeError("scatter_rows: index out of range");
    if (index[i] < 0) continue;
    for (int k = 0; k < c; ++k) out[index[i] * c + k] += x.values()[i * c + k];
  }
  return detail::make_result<T>({rows, c}, std::move(out), {x}, [index, c](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] < 0) continue;
      for (int k = 0; k < c; ++k) g[i * c + k] += self.grad[index[i] * c + k];
    }
  });
}

/// Stable ascending argsort: ties keep their original order.
template <class K>
std::vector<std::int64_t> stable_argsort(std::span<const K> keys) {
  std::vector<std::int64_t> idx(keys.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) { return keys[a] < keys[b]; });
  return idx;
}

// ---------------------------------------------------------------- resampling

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = 2 * h, wo = 2 * w;
  std::vector<T> out(static_cast<std::size_t>(n) * c * ho * wo);
  const std::size_t planes = static_cast<std::size_t>(n) * c;
  for (std::size_t p = 0; p < planes; ++p)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx)
        out[(p * ho + y) * wo + xx] = x.values()[(p * h + y / 2) * w + xx / 2];
  return detail::make_result<T>({n, c, ho, wo}, std::move(out), {x}, [=](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    for (std::size_t p = 0; p < planes; ++p)
      for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx) g[(p * h + y / 2) * w + xx / 2] += self.grad[(p * ho + y) * wo + xx];
  });
}

/// [N, C, H, W] -> [N, C*f*f, H/f, W/f]; output channel c*f*f + dy*f + dx.
template <class T>
Tensor<T> space_to_depth(const Tensor<T>& x, int f) {
  require_rank(x, 4, "space_to_depth");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (f <= 0 || h % f || w % f) throw ShapeError("space_to_depth: spatial extent not divisible by factor");
  const int ho = h / f, wo = w / f, co = c * f * f;
  std::vector<std::int64_t> src_of(static_cast<std::size_t>(n) * co * ho * wo);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int dy = 0; dy < f; ++dy)
        for (int dx = 0; dx < f; ++dx)
          for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx) {
              const std::size_t o = ((static_cast<std::size_t>(b) * co + ch * f * f + dy * f + dx) * ho + y) * wo + xx;
              src_of[o] = ((static_cast<std::int64_t>(b) * c + ch) * h + y * f + dy) * w + xx * f + dx;
            }
  std::vector<T> out(src_of.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[src_of[i]];
  return detail::make_result<T>({n, co, ho, wo}, std::move(out), {x}, [src_of = std::move(src_of)](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    for (std::size_t i = 0; i < src_of.size(); ++i) g[src_of[i]] += self.grad[i];
  });
}

/// Inverse of space_to_depth.
template <class T>
Tensor<T> depth_to_space(const Tensor<T>& x, int f) {
  require_rank(x, 4, "depth_to_space");
  const int n = x.dim(0), co = x.dim(1), ho = x.dim(2), wo = x.dim(3);
  if (f <= 0 || co % (f * f)) throw ShapeError("depth_to_space: channels not divisible by factor squared");
  const int c = co / (f * f), h = ho * f, w = wo * f;
  std::vector<std::int64_t> src_of(x.numel());
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const std::size_t o = ((static_cast<std::size_t>(b) * c + ch) * h + y) * w + xx;
          src_of[o] = ((static_cast<std::int64_t>(b) * co + ch * f * f + (y % f) * f + xx % f) * ho + y / f) * wo + xx / f;
        }
  std::vector<T> out(src_of.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[src_of[i]];
  return detail::make_result<T>({n, c, h, w}, std::move(out), {x}, [src_of = std::move(src_of)](Node<T>& self) {
    T* g = detail::grad_sink(self, 0);
    for (std::size_t i = 0; i < src_of.size(); ++i) g[src_of[i]] += self.grad[i];
  });
}

/// Every stored value finite.
template <class T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace fps
