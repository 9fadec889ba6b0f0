#pragma once

#include <cstdint>
#include <cstring>
#include <vector>

namespace fps {

namespace detail {

inline std::uint64_t& attention_mac_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

/// 256-bit vector of T.
template <class T>
struct Simd;
template <>
struct Simd<float> {
  typedef float type __attribute__((vector_size(32)));
};
template <>
struct Simd<double> {
  typedef double type __attribute__((vector_size(32)));
};

/// out[c, r] = in[r, c] for a [rows, cols] matrix, in cache-sized tiles.
template <class T>
void transpose_into(const T* in, T* out, int rows, int cols) {
  constexpr int kTile = 32;
  for (int r0 = 0; r0 < rows; r0 += kTile)
    for (int c0 = 0; c0 < cols; c0 += kTile) {
      const int r1 = r0 + kTile < rows ? r0 + kTile : rows;
      const int c1 = c0 + kTile < cols ? c0 + kTile : cols;
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) out[static_cast<std::size_t>(c) * rows + r] = in[static_cast<std::size_t>(r) * cols + c];
    }
}

/// C[m,n] (+)= op(A)[m,k] * op(B)[k,n], all row-major. op(X) = X^T when the
/// matching flag is set, in which case X is stored [k,m] / [n,k].
template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m) * n; ++i) c[i] = T(0);
  if (m == 0 || n == 0 || k == 0) return;

  // A is read in place through strides: element (i, p) sits at
  // a[i * row_step + p * k_step].
  const std::size_t row_step = trans_a ? 1 : static_cast<std::size_t>(k);
  const std::size_t k_step = trans_a ? static_cast<std::size_t>(m) : 1;
  std::vector<T> b_packed;
  if (trans_b) {
    // Dot-product form is cheaper than packing when the output is narrow.
    if (n <= 4) {
      for (int i = 0; i < m; ++i) {
        const T* ar = a + i * row_step;
        for (int j = 0; j < n; ++j) {
          const T* br = b + static_cast<std::size_t>(j) * k;
          T s = T(0);
          for (int p = 0; p < k; ++p) s += ar[p * k_step] * br[p];
          c[static_cast<std::size_t>(i) * n + j] += s;
        }
      }
      return;
    }
    b_packed.resize(static_cast<std::size_t>(k) * n);
    transpose_into(b, b_packed.data(), n, k);
    b = b_packed.data();
  }

  // Register-blocked tiles of 4 rows x 2 vectors: the accumulators stay in
  // registers for the whole k loop, so C is touched once per tile.
  using V = typename Simd<T>::type;
  constexpr int kLanes = static_cast<int>(sizeof(V) / sizeof(T));
  constexpr int kCols = 2 * kLanes;
  auto load = [](const T* p) {
    V v;
    std::memcpy(&v, p, sizeof v);
    return v;
  };
  auto store_add = [](T* p, V v) {
    V o;
    std::memcpy(&o, p, sizeof o);
    o += v;
    std::memcpy(p, &o, sizeof o);
  };
  const int n_main = n - n % kCols;
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    const T* a0 = a + i * row_step;
    const T* a1 = a0 + row_step;
    const T* a2 = a1 + row_step;
    const T* a3 = a2 + row_step;
    for (int j0 = 0; j0 < n_main; j0 += kCols) {
      V c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
      for (int p = 0; p < k; ++p) {
        const T* br = b + static_cast<std::size_t>(p) * n + j0;
        const V b0 = load(br), b1 = load(br + kLanes);
        const std::size_t q = p * k_step;
        const T v0 = a0[q], v1 = a1[q], v2 = a2[q], v3 = a3[q];
        c00 += v0 * b0;
        c01 += v0 * b1;
        c10 += v1 * b0;
        c11 += v1 * b1;
        c20 += v2 * b0;
        c21 += v2 * b1;
        c30 += v3 * b0;
        c31 += v3 * b1;
      }
      T* cr = c + static_cast<std::size_t>(i) * n + j0;
      store_add(cr, c00);
      store_add(cr + kLanes, c01);
      store_add(cr + n, c10);
      store_add(cr + n + kLanes, c11);
      store_add(cr + 2 * n, c20);
      store_add(cr + 2 * n + kLanes, c21);
      store_add(cr + 3 * n, c30);
      store_add(cr + 3 * n + kLanes, c31);
    }
    if (n_main < n) {
      const int w = n - n_main;
      T* __restrict c0 = c + static_cast<std::size_t>(i) * n + n_main;
      T* __restrict c1 = c0 + n;
      T* __restrict c2 = c1 + n;
      T* __restrict c3 = c2 + n;
      for (int p = 0; p < k; ++p) {
        const T* __restrict br = b + static_cast<std::size_t>(p) * n + n_main;
        const std::size_t q = p * k_step;
        const T v0 = a0[q], v1 = a1[q], v2 = a2[q], v3 = a3[q];
        for (int j = 0; j < w; ++j) {
          c0[j] += v0 * br[j];
          c1[j] += v1 * br[j];
          c2[j] += v2 * br[j];
          c3[j] += v3 * br[j];
        }
      }
    }
  }
  for (; i < m; ++i) {
    T* __restrict cr = c + static_cast<std::size_t>(i) * n;
    const T* ar = a + i * row_step;
    for (int p = 0; p < k; ++p) {
      const T* __restrict br = b + static_cast<std::size_t>(p) * n;
      const T v = ar[p * k_step];
      for (int j = 0; j < n; ++j) cr[j] += v * br[j];
    }
  }
}

}  // namespace detail

/// Multiply-accumulates performed by batched matrix products (the attention
/// cores) on this thread since the last reset.
inline std::uint64_t attention_macs() { return detail::attention_mac_counter(); }
inline void reset_attention_macs() { detail::attention_mac_counter() = 0; }

}  // namespace fps
