#pragma once

// Self-contained invariant and oracle suites shared by `selftest` and the
// acceptance runner. Every oracle here is written with plain loops so it does
// not share code paths with the operators it checks.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "fps/analysis.hpp"
#include "fps/core/gradcheck.hpp"
#include "fps/metrics.hpp"
#include "fps/model.hpp"
#include "fps/mrisim.hpp"
#include "fps/trainer.hpp"

namespace fps {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

inline bool all_passed(const std::vector<CheckResult>& rs) {
  return std::all_of(rs.begin(), rs.end(), [](const CheckResult& r) { return r.passed; });
}

inline std::string format_sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

namespace check_detail {

using Mat = std::vector<std::vector<double>>;

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed, "check");
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from(std::move(shape), std::move(v));
}

template <class A, class B>
double max_abs_diff(const A& a, const B& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

inline void zero(Tensor<double>& t) {
  for (auto& x : t.mutable_data()) x = 0.0;
}

inline Tensor<double> random_mask(int n, int size, std::uint64_t seed, double p = 0.3) {
  Rng rng(seed, "check_mask");
  std::vector<double> v(static_cast<std::size_t>(n) * size * size);
  for (auto& x : v) x = rng.uniform() < p ? 1.0 : 0.0;
  return Tensor<double>::from({n, 1, size, size}, std::move(v));
}

inline int fold(int i, int n) {
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

inline std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const std::vector<double>& bias,
                                       int stride, int dilation, int groups, bool reflect) {
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), k = w.dim(2);
  const int pad = dilation * (k - 1) / 2;
  const int ho = (h + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
  const int wo = (wd + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
  const int cin_g = cin / groups, cout_g = cout / groups;
  std::vector<double> out(static_cast<std::size_t>(n) * cout * ho * wo, 0.0);
  for (int b = 0; b < n; ++b)
    for (int oc = 0; oc < cout; ++oc)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double s = bias.empty() ? 0.0 : bias[oc];
          const int grp = oc / cout_g;
          for (int ic = 0; ic < cin_g; ++ic)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                int iy = oy * stride - pad + ky * dilation;
                int ix = ox * stride - pad + kx * dilation;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) {
                  if (!reflect) continue;
                  iy = fold(iy, h);
                  ix = fold(ix, wd);
                }
                s += w.values()[((oc * cin_g + ic) * k + ky) * k + kx] *
                     x.values()[((b * cin + grp * cin_g + ic) * h + iy) * wd + ix];
              }
          out[((static_cast<std::size_t>(b) * cout + oc) * ho + oy) * wo + ox] = s;
        }
  return out;
}

inline Mat tokens_of(const Tensor<double>& x, int n) {
  const int c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Mat t(hw, std::vector<double>(c));
  for (int j = 0; j < hw; ++j)
    for (int k = 0; k < c; ++k) t[j][k] = x.values()[(static_cast<std::size_t>(n) * c + k) * hw + j];
  return t;
}

inline std::vector<double> project(const Tensor<double>& w, const std::vector<double>& x, int row0 = 0, int rows = -1) {
  const int in = w.dim(1);
  if (rows < 0) rows = w.dim(0);
  std::vector<double> y(rows, 0.0);
  for (int o = 0; o < rows; ++o)
    for (int i = 0; i < in; ++i) y[o] += w.values()[(row0 + o) * in + i] * x[i];
  return y;
}

inline std::vector<double> softmax_row(std::vector<double> v) {
  double mx = *std::max_element(v.begin(), v.end()), s = 0.0;
  for (auto& x : v) s += (x = std::exp(x - mx));
  for (auto& x : v) x /= s;
  return v;
}

inline Mat dense_msa_oracle(const Mat& tok, const MsaWeights<double>& w) {
  const int j = static_cast<int>(tok.size()), c = static_cast<int>(tok[0].size()), d = c / w.heads;
  Mat concat(j, std::vector<double>(c, 0.0));
  for (int h = 0; h < w.heads; ++h) {
    Mat q(j), k(j), v(j);
    for (int t = 0; t < j; ++t) {
      q[t] = project(w.query, tok[t], h * d, d);
      k[t] = project(w.key, tok[t], h * d, d);
      v[t] = project(w.value, tok[t], h * d, d);
    }
    for (int a = 0; a < j; ++a) {
      std::vector<double> logit(j);
      for (int b = 0; b < j; ++b) {
        double s = 0.0;
        for (int e = 0; e < d; ++e) s += q[a][e] * k[b][e];
        logit[b] = s / std::sqrt(static_cast<double>(d));
      }
      const auto p = softmax_row(logit);
      for (int b = 0; b < j; ++b)
        for (int e = 0; e < d; ++e) concat[a][h * d + e] += p[b] * v[b][e];
    }
  }
  Mat out(j);
  for (int t = 0; t < j; ++t) out[t] = project(w.output, concat[t]);
  return out;
}

inline std::vector<double> flatten_map(const Mat& tok, int c) {
  const int hw = static_cast<int>(tok.size());
  std::vector<double> v(static_cast<std::size_t>(hw) * c);
  for (int j = 0; j < hw; ++j)
    for (int k = 0; k < c; ++k) v[static_cast<std::size_t>(k) * hw + j] = tok[j][k];
  return v;
}

// Direct 2-D Gaussian blur with mirrored borders, item 0 only.
inline std::vector<double> blur_oracle(const Tensor<double>& x, double sigma) {
  const int c = x.dim(1), h = x.dim(2), w = x.dim(3), r = static_cast<int>(std::ceil(3 * sigma));
  double norm = 0.0;
  for (int a = -r; a <= r; ++a)
    for (int b = -r; b <= r; ++b) norm += std::exp(-(a * a + b * b) / (2 * sigma * sigma));
  std::vector<double> out(static_cast<std::size_t>(c) * h * w, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double s = 0.0;
        for (int a = -r; a <= r; ++a)
          for (int b = -r; b <= r; ++b)
            s += std::exp(-(a * a + b * b) / (2 * sigma * sigma)) / norm *
                 x.values()[(ch * h + fold(y + a, h)) * w + fold(xx + b, w)];
        out[(ch * h + y) * w + xx] = s;
      }
  return out;
}

// Naive unnormalized DFT of one complex plane.
inline std::vector<std::complex<double>> dft2_oracle(const std::vector<std::complex<double>>& g, int h, int w) {
  std::vector<std::complex<double>> out(g.size());
  for (int u = 0; u < h; ++u)
    for (int v = 0; v < w; ++v) {
      std::complex<double> s = 0.0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          s += g[static_cast<std::size_t>(y) * w + x] *
               std::polar(1.0, -2.0 * std::numbers::pi * (static_cast<double>(u * y) / h + static_cast<double>(v * x) / w));
      out[static_cast<std::size_t>(u) * w + v] = s;
    }
  return out;
}

inline ModelConfig small_model(int c0 = 8) {
  ModelConfig c;
  c.base_channels = c0;
  c.hefr_stages = 1;
  c.expert_hidden = 8;
  return c;
}

struct Sample {
  Tensor<double> gt, y, zf, mask;
};

inline Sample make_sample(int n, int size, std::uint64_t seed) {
  Sample s;
  s.gt = random_tensor({n, 2, size, size}, seed);
  s.mask = random_mask(n, size, seed + 100);
  {
    NoGradGuard guard;
    s.y = mul(fft2(s.gt), expand_mask(s.mask));
    s.zf = ifft2(s.y);
  }
  return s;
}

inline CheckResult tolerance(std::string name, double err, double tol) {
  return {std::move(name), err < tol, "max err " + format_sci(err) + " (tol " + format_sci(tol) + ")"};
}

inline CheckResult exact(std::string name, double err) {
  return {std::move(name), err == 0.0, "max err " + format_sci(err) + " (exact)"};
}

inline CheckResult from_gradcheck(std::string name, const GradCheckResult& r, double tol) {
  return {std::move(name), r.passed(tol),
          "max rel err " + format_sci(r.max_rel_error) + " over " + std::to_string(r.probes) + " probes (tol " +
              format_sci(tol) + ")"};
}

}  // namespace check_detail

// ------------------------------------------------------ gradient checks

/// Finite-difference checks of every differentiable operation in double
/// precision. The last entry reports the wall time of the whole suite.
inline std::vector<CheckResult> gradient_suite(double tol = 1e-4, double time_limit_s = 300.0) {
  using namespace check_detail;
  using In = std::vector<Tensor<double>>;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<CheckResult> out;

  {
    auto x = random_tensor({2, 3, 7, 7}, 1);
    auto w = random_tensor({4, 3, 3, 3}, 2), b = random_tensor({4}, 3);
    auto dw = random_tensor({6, 1, 5, 5}, 4);
    auto r1 = grad_check([&](const In& in) { return conv2d(in[0], in[1], &in[2], {2, 1, 1, Padding::reflect}); },
                         {x, w, b}, 30, 1);
    auto r2 = grad_check(
        [&](const In& in) { return conv2d(in[0], in[1], nullptr, {1, 2, 3, Padding::zero}); },
        {random_tensor({1, 3, 8, 8}, 5), dw}, 30, 2);
    GradCheckResult r = r1.max_rel_error >= r2.max_rel_error ? r1 : r2;
    r.probes = r1.probes + r2.probes;
    out.push_back(from_gradcheck("conv2d", r, tol));
  }
  out.push_back(from_gradcheck(
      "layer_norm",
      grad_check([](const In& in) { return layer_norm(in[0], in[1], in[2]); },
                 {random_tensor({2, 5, 3, 3}, 6, -2, 2), random_tensor({5}, 7, 0.5, 1.5), random_tensor({5}, 8)}, 40),
      tol));
  out.push_back(from_gradcheck(
      "softmax", grad_check([](const In& in) { return softmax(in[0]); }, {random_tensor({3, 4, 7}, 9, -3, 3)}, 40), tol));
  out.push_back(from_gradcheck("pyramid",
                               grad_check(
                                   [](const In& in) {
                                     auto p = frequency_pyramid(in[0], default_sigmas(3));
                                     auto levels = p.levels;
                                     levels.push_back(p.coarse);
                                     return concat_channels(levels);
                                   },
                                   {random_tensor({1, 2, 12, 12}, 10)}, 40),
                               tol));
  {
    ParamStore<double> s(11);
    auto w = make_fmam_weights(s, "f", 8, 2, 3);
    FmamOptions opt;
    out.push_back(from_gradcheck(
        "fmam_forward",
        grad_check([&](const In& in) { return fmam_forward(in[0], w, opt); },
                   {random_tensor({1, 8, 6, 6}, 12), w.query[0], w.key[2], w.value, w.output}, 50),
        tol));
  }
  {
    ParamStore<double> s(13);
    auto w = make_msa_weights(s, "m", 8, 2);
    auto hp = make_hash_params(s, "h", 8);
    out.push_back(from_gradcheck(
        "spam_forward",
        grad_check([&](const In& in) { return spam_forward(in[0], w, hp, 4); },
                   {random_tensor({2, 8, 5, 5}, 14), w.query, w.key, w.value, w.output}, 50),
        tol));
  }
  {
    ParamStore<double> s(15);
    auto w = make_sdfn_weights(s, "s", 4, 2);
    out.push_back(from_gradcheck(
        "sdfn_forward",
        grad_check([&](const In& in) { return sdfn_forward(in[0], w); },
                   {random_tensor({1, 4, 6, 6}, 16), w.expand, w.dw3_a, w.dw5_b, w.fuse, w.ln_gamma}, 50),
        tol));
  }
  {
    ParamStore<double> s(17);
    auto w = make_hefr_weights(s, "h", 4);
    out.push_back(from_gradcheck(
        "hefr_forward",
        grad_check([&](const In& in) { return hefr_forward(in[0], w); },
                   {random_tensor({1, 4, 6, 6}, 18), w.w1, w.w2, w.kernel[2], w.kernel[5], w.pw[1], w.out}, 60),
        tol));
  }
  {
    ParamStore<double> s(19);
    ModelConfig cfg = small_model();
    auto w = make_fps_block_weights(s, "b", 8, 2, cfg);
    out.push_back(from_gradcheck(
        "fps_block",
        grad_check([&](const In& in) { return fps_block(in[0], w, cfg); },
                   {random_tensor({1, 8, 6, 6}, 20), w.fmam.query[1], w.msa.value, w.fusion.pointwise, w.sdfn.fuse,
                    w.ln_gamma},
                   50),
        tol));
  }
  {
    auto smp = make_sample(1, 8, 21);
    out.push_back(from_gradcheck(
        "data_consistency",
        grad_check([&](const In& in) { return data_consistency(in[0], smp.y, smp.mask); },
                   {random_tensor({1, 2, 8, 8}, 22)}, 40),
        tol));
  }
  {
    auto m = init_weights<double>(small_model(8), 21);
    auto smp = make_sample(1, 16, 4);
    out.push_back(from_gradcheck(
        "forward_16x16",
        grad_check([&](const In& in) { return forward(m, in[0], smp.y, smp.mask); },
                   {smp.zf.clone(), m.store.at("embed.w"), m.store.at("enc1.0.fmam.q0"), m.store.at("enc3.1.msa.k"),
                    m.store.at("hefr_in.0.w2"), m.store.at("down2.w"), m.store.at("dec4.0.sdfn.dw5b"),
                    m.store.at("head.w")},
                   40),
        tol));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f s (limit %.0f s)", secs, time_limit_s);
  out.push_back({"gradient_suite_runtime", secs < time_limit_s, buf});
  return out;
}

// ---------------------------------------------------- equivalence oracles

inline std::vector<CheckResult> equivalence_oracles() {
  using namespace check_detail;
  std::vector<CheckResult> out;
  {
    ParamStore<double> s(12);
    const int c = 8, n = 2;
    auto w = make_msa_weights(s, "m", c, 2);
    auto hp = make_hash_params(s, "h", c);
    auto x = random_tensor({n, c, 4, 4}, 13, -2, 2);
    const auto got = spam_forward(x, w, hp, 1);
    const auto dense = dense_msa(x, w);
    double err = 0.0;
    for (int b = 0; b < n; ++b) {
      const auto expect = flatten_map(dense_msa_oracle(tokens_of(x, b), w), c);
      err = std::max(err, max_abs_diff(std::span(got.values()).subspan(b * c * 16, c * 16), expect));
      err = std::max(err, max_abs_diff(std::span(dense.values()).subspan(b * c * 16, c * 16), expect));
    }
    out.push_back(tolerance("spam_single_group_vs_dense_msa", err, 1e-8));
  }
  {
    ParamStore<double> s(3);
    const int c = 6, j = 64;
    auto w = make_fmam_weights(s, "f", c, 1, 1);
    std::vector<double> eye(c * c, 0.0);
    for (int i = 0; i < c; ++i) eye[i * c + i] = 1.0;
    w.value = Tensor<double>::from({c, c}, eye);
    w.output = Tensor<double>::from({c, c}, eye);
    auto x = random_tensor({1, c, 8, 8}, 9, -2, 2);
    FmamOptions opt;
    opt.sigmas = {1.0, 2.0};
    const auto got = fmam_forward(x, w, opt);
    const auto b1 = blur_oracle(x, 1.0), b2 = blur_oracle(x, 2.0);
    std::vector<double> level(x.numel());
    for (std::size_t i = 0; i < level.size(); ++i) level[i] = b2[i] - b1[i];
    const Mat t = tokens_of(Tensor<double>::from(x.shape(), level), 0);
    const Mat f = tokens_of(x, 0);
    Mat o(j, std::vector<double>(c, 0.0));
    for (int a = 0; a < j; ++a) {
      const auto q = project(w.query[0], t[a]);
      std::vector<double> logit(j);
      for (int b = 0; b < j; ++b) {
        const auto k = project(w.key[0], t[b]);
        double d = 0.0;
        for (int e = 0; e < c; ++e) d += q[e] * k[e];
        logit[b] = d / std::sqrt(static_cast<double>(c));
      }
      const auto p = softmax_row(logit);
      for (int b = 0; b < j; ++b)
        for (int e = 0; e < c; ++e) o[a][e] += p[b] * f[b][e];
    }
    out.push_back(tolerance("fmam_single_level_single_head_vs_attention", max_abs_diff(got.values(), flatten_map(o, c)), 1e-8));
  }
  {
    struct Case {
      Shape in, k;
      int stride, dilation, groups;
      bool reflect;
    };
    const std::vector<Case> cases = {
        {{2, 4, 6, 6}, {4, 1, 3, 3}, 1, 1, 4, true}, {{1, 4, 8, 8}, {6, 2, 5, 5}, 1, 1, 2, false},
        {{1, 3, 8, 8}, {5, 3, 3, 3}, 2, 1, 1, true}, {{1, 2, 9, 9}, {2, 2, 3, 3}, 1, 3, 1, true},
        {{2, 3, 5, 7}, {4, 3, 1, 1}, 1, 1, 1, true}, {{1, 3, 7, 5}, {3, 1, 5, 5}, 1, 2, 3, false},
    };
    double err = 0.0;
    std::uint64_t seed = 30;
    for (const auto& c : cases) {
      auto x = random_tensor(c.in, seed++), w = random_tensor(c.k, seed++), b = random_tensor({c.k[0]}, seed++);
      auto y = conv2d(x, w, &b, {c.stride, c.dilation, c.groups, c.reflect ? Padding::reflect : Padding::zero});
      err = std::max(err, max_abs_diff(y.values(), conv_oracle(x, w, b.values(), c.stride, c.dilation, c.groups, c.reflect)));
    }
    out.push_back(tolerance("conv2d_vs_nested_loops", err, 1e-10));
  }
  {
    double err = 0.0;
    for (auto [m, k, n] : {std::array{3, 4, 2}, std::array{17, 33, 9}, std::array{64, 16, 64}}) {
      auto a = random_tensor({m, k}, m), b = random_tensor({k, n}, n + 100);
      std::vector<double> ref(static_cast<std::size_t>(m) * n, 0.0);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          for (int p = 0; p < k; ++p) ref[i * n + j] += a.values()[i * k + p] * b.values()[p * n + j];
      err = std::max(err, max_abs_diff(matmul(a, b).values(), ref));
      auto bt = random_tensor({2, n, k}, 7), ab = random_tensor({2, m, k}, 8);
      std::vector<double> refb(2 * static_cast<std::size_t>(m) * n, 0.0);
      for (int z = 0; z < 2; ++z)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            for (int p = 0; p < k; ++p)
              refb[(z * m + i) * n + j] += ab.values()[(z * m + i) * k + p] * bt.values()[(z * n + j) * k + p];
      err = std::max(err, max_abs_diff(bmm(ab, bt, true).values(), refb));
    }
    out.push_back(tolerance("matmul_vs_nested_loops", err, 1e-10));
  }
  return out;
}

// -------------------------------------------------- structural identities

inline std::vector<CheckResult> structural_identities() {
  using namespace check_detail;
  std::vector<CheckResult> out;
  {
    double err = 0.0;
    for (int t = 0; t < 10; ++t) {
      auto x = random_tensor({1, 2, 16, 16}, 100 + t, -3, 3);
      const auto stack = build_gaussian_stack(x, default_sigmas(3));
      const auto p = build_frequency_pyramid(stack);
      std::vector<double> sum(x.numel(), 0.0);
      for (const auto& l : p.levels)
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += l.values()[i];
      std::vector<double> expect(x.numel());
      for (std::size_t i = 0; i < expect.size(); ++i) expect[i] = stack.back().values()[i] - stack.front().values()[i];
      err = std::max(err, max_abs_diff(sum, expect));
    }
    out.push_back(tolerance("pyramid_telescoping", err, 1e-10));
  }
  {
    NoGradGuard guard;
    double idem = 0.0, sampled = 0.0;
    for (int t = 0; t < 5; ++t) {
      auto s = make_sample(2, 16, 200 + t);
      auto x = random_tensor({2, 2, 16, 16}, 300 + t);
      auto once = data_consistency(x, s.y, s.mask);
      auto twice = data_consistency(once, s.y, s.mask);
      idem = std::max(idem, max_abs_diff(once.values(), twice.values()));
      auto k = fft2(once);
      const auto m = expand_mask(s.mask);
      for (std::size_t i = 0; i < k.numel(); ++i)
        if (m.values()[i] != 0.0) sampled = std::max(sampled, std::abs(k.values()[i] - s.y.values()[i]));
    }
    out.push_back(tolerance("dc_idempotence", idem, 1e-10));
    out.push_back(tolerance("dc_sampled_locations", sampled, 1e-10));
  }
  {
    NoGradGuard guard;
    ParamStore<double> s(12);
    auto hp = make_hash_params(s, "h", 5);
    double err = 0.0;
    for (int groups : {1, 3, 4, 7}) {
      auto x = random_tensor({2, 5, 5, 5}, 40 + groups);
      auto y = spam_route(x, hp, groups, [](const Tensor<double>& g, const std::vector<char>&) { return g; });
      err = std::max(err, max_abs_diff(y.values(), x.values()));
    }
    out.push_back(exact("unsort_after_sort", err));
  }
  {
    NoGradGuard guard;
    double round = 0.0, parseval = 0.0, dft = 0.0;
    for (int t = 0; t < 4; ++t) {
      auto x = random_tensor({1, 2, 16, 32}, 500 + t);
      auto k = fft2(x);
      round = std::max(round, max_abs_diff(ifft2(k).values(), x.values()));
      double ex = 0.0, ek = 0.0;
      for (double v : x.values()) ex += v * v;
      for (double v : k.values()) ek += v * v;
      parseval = std::max(parseval, std::abs(ex - ek) / ex);
      std::vector<std::complex<double>> g(512);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = {x.values()[i], x.values()[512 + i]};
      const auto ref = dft2_oracle(g, 16, 32);
      const double norm = 1.0 / std::sqrt(16.0 * 32.0);
      for (std::size_t i = 0; i < g.size(); ++i)
        dft = std::max(dft, std::abs(ref[i] * norm - std::complex<double>(k.values()[i], k.values()[512 + i])));
    }
    out.push_back(tolerance("fft_roundtrip", round, 1e-10));
    out.push_back(tolerance("fft_parseval", parseval, 1e-10));
    out.push_back(tolerance("fft_vs_direct_dft", dft, 1e-9));
  }
  {
    NoGradGuard guard;
    ParamStore<double> s(3);
    auto w = make_sdfn_weights(s, "s", 4, 2);
    zero(w.fuse);
    zero(w.fuse_bias);
    auto x = random_tensor({2, 4, 6, 6}, 1);
    out.push_back(exact("sdfn_zero_output_identity", max_abs_diff(sdfn_forward(x, w).values(), x.values())));
  }
  {
    NoGradGuard guard;
    ParamStore<double> s(6);
    auto w = make_hefr_weights(s, "h", 4);
    zero(w.out);
    zero(w.out_bias);
    auto x = random_tensor({2, 4, 8, 8}, 2);
    out.push_back(exact("hefr_zero_output_identity", max_abs_diff(hefr_forward(x, w).values(), x.values())));
  }
  {
    NoGradGuard guard;
    double err = 0.0;
    for (const char* variant : {"full", "no_fmam", "no_spam", "no_sdfn"}) {
      ModelConfig cfg = small_model();
      cfg.fmam_on = std::string(variant) != "no_fmam";
      cfg.spam_on = std::string(variant) != "no_spam";
      cfg.sdfn_on = std::string(variant) != "no_sdfn";
      ParamStore<double> s(8);
      auto w = make_fps_block_weights(s, "b", 8, 2, cfg);
      zero(w.fusion.pointwise);
      zero(w.fusion.pointwise_bias);
      if (cfg.sdfn_on) {
        zero(w.sdfn.fuse);
        zero(w.sdfn.fuse_bias);
      } else {
        zero(w.ffn.w2);
        zero(w.ffn.b2);
      }
      auto x = random_tensor({1, 8, 8, 8}, 3);
      err = std::max(err, max_abs_diff(fps_block(x, w, cfg).values(), x.values()));
    }
    out.push_back(exact("fps_block_zero_output_identity", err));
  }
  return out;
}

// ------------------------------------------------------- mask statistics

inline const std::vector<double>& configured_afs() {
  static const std::vector<double> afs{4, 5, 8, 10};
  return afs;
}

/// `count` masks per kind and AF, at each size: sampled fraction within
/// [0.9, 1.1] / af, Cartesian column count exactly round(W / af) with the
/// whole centre band present, and regeneration reproducing the same mask.
inline std::vector<CheckResult> mask_statistics(int count = 100, std::vector<int> sizes = {32, 64}) {
  std::vector<CheckResult> out;
  for (MaskKind kind : {MaskKind::cartesian, MaskKind::radial, MaskKind::random}) {
    int bad = 0, total = 0;
    double worst = 0.0;
    std::string first_bad;
    for (int size : sizes)
      for (double af : configured_afs())
        for (int i = 0; i < count; ++i) {
          const std::uint64_t seed = 1000 + static_cast<std::uint64_t>(i);
          const SamplingMask m = make_mask(kind, size, af, seed);
          ++total;
          const double rel = m.fraction() * af;
          worst = std::max(worst, std::abs(rel - 1.0));
          bool ok = rel >= 0.9 && rel <= 1.1;
          if (kind == MaskKind::cartesian) {
            int cols = 0;
            for (int c = 0; c < size; ++c) cols += m.at(0, c) != 0.0;
            const int center = static_cast<int>(std::lround(default_center_fraction(af) * size));
            int in_center = 0;
            for (int c = 0; c < size; ++c) {
              const int f = c <= size / 2 ? c : c - size;
              // positive side wins ties, so the band covers [-(n-1)/2, n/2]
              if (f <= center / 2 && f >= -((center - 1) / 2)) in_center += m.at(0, c) != 0.0;
            }
            ok = ok && cols == std::lround(size / af) && in_center == center;
            for (int r = 1; r < size && ok; ++r)
              for (int c = 0; c < size; ++c) ok = ok && m.at(r, c) == m.at(0, c);
          }
          if (i < 10) ok = ok && make_mask(kind, size, af, seed).values == m.values;
          if (!ok) {
            ++bad;
            if (first_bad.empty())
              first_bad = "; first failure size " + std::to_string(size) + " af " + format_double(af) + " seed " +
                          std::to_string(seed);
          }
        }
    out.push_back({"mask_" + mask_kind_name(kind), bad == 0,
                   std::to_string(total - bad) + "/" + std::to_string(total) + " masks ok, worst |fraction*af - 1| " +
                       format_sci(worst) + first_bad});
  }
  return out;
}

// ---------------------------------------------------------- op counting

/// Measured SPAM attention MACs at fixed J for group counts N and 4N.
inline std::vector<CheckResult> complexity_bookkeeping() {
  using namespace check_detail;
  NoGradGuard guard;
  std::vector<CheckResult> out;
  const int c = 16, side = 32, j = side * side;
  ParamStore<double> s(5);
  auto w = make_msa_weights(s, "m", c, 2);
  auto hp = make_hash_params(s, "h", c);
  auto x = random_tensor({1, c, side, side}, 6);
  auto measure = [&](int groups) {
    reset_attention_macs();
    (void)spam_forward(x, w, hp, groups);
    return attention_macs();
  };
  for (int n : {1, 4, 16}) {
    const auto a = measure(n), b = measure(4 * n);
    const double ratio = static_cast<double>(a) / static_cast<double>(b);
    const auto predicted = attention_op_count(j, c, n, 0).spam;
    char buf[160];
    std::snprintf(buf, sizeof buf, "J=%d: %llu MACs at N=%d, %llu at N=%d, ratio %.4f (predicted MACs %llu)", j,
                  static_cast<unsigned long long>(a), n, static_cast<unsigned long long>(b), 4 * n, ratio,
                  static_cast<unsigned long long>(predicted));
    out.push_back({"spam_macs_N" + std::to_string(n) + "_vs_N" + std::to_string(4 * n),
                   std::abs(ratio - 4.0) <= 0.2 && a == predicted, buf});
  }
  return out;
}

// ------------------------------------------------- remaining invariants

inline std::vector<CheckResult> module_invariants() {
  using namespace check_detail;
  std::vector<CheckResult> out;
  {
    NoGradGuard guard;
    auto x = random_tensor({5, 9}, 1, -4, 4);
    auto p = softmax(x);
    double err = 0.0;
    for (int r = 0; r < 5; ++r) {
      double s = 0.0;
      for (int c = 0; c < 9; ++c) s += p.values()[r * 9 + c];
      err = std::max(err, std::abs(s - 1.0));
    }
    out.push_back(tolerance("softmax_rows_sum_to_one", err, 1e-12));
  }
  {
    NoGradGuard guard;
    auto x = random_tensor({2, 6, 3, 3}, 2, -3, 3);
    auto y = layer_norm(x, Tensor<double>::full({6}, 1.0), Tensor<double>::zeros({6}));
    double err = 0.0;
    for (int n = 0; n < 2; ++n)
      for (int p = 0; p < 9; ++p) {
        double m = 0.0, v = 0.0;
        for (int c = 0; c < 6; ++c) m += y.values()[(n * 6 + c) * 9 + p] / 6.0;
        for (int c = 0; c < 6; ++c) v += std::pow(y.values()[(n * 6 + c) * 9 + p] - m, 2) / 6.0;
        err = std::max({err, std::abs(m), std::abs(v - 1.0) * 1e-3});
      }
    out.push_back(tolerance("layer_norm_standardizes", err, 1e-6));
  }
  {
    NoGradGuard guard;
    auto x = Tensor<double>::full({1, 3, 12, 12}, 0.7);
    const auto p = frequency_pyramid(x, default_sigmas(3));
    double err = 0.0;
    for (const auto& l : p.levels) err = std::max(err, max_abs_diff(l.values(), std::vector<double>(l.numel(), 0.0)));
    out.push_back(tolerance("pyramid_constant_input_empty_bands", err, 1e-12));
  }
  {
    NoGradGuard guard;
    ParamStore<double> s(4);
    double err = 0.0;
    for (int levels : {1, 3}) {
      auto w = make_fmam_weights(s, "f" + std::to_string(levels), 8, 2, levels);
      FmamOptions opt;
      opt.sigmas = default_sigmas(levels);
      auto sc = fmam_scores(random_tensor({1, 8, 4, 4}, 9), w, opt);
      for (int r = 0; r < 16; ++r) {
        double sum = 0.0;
        for (int c = 0; c < 16; ++c) sum += sc.values()[r * 16 + c];
        err = std::max(err, std::abs(sum - 2.0 * levels));
      }
    }
    out.push_back(tolerance("fmam_score_rows_sum_to_levels_times_heads", err, 1e-10));
  }
  {
    NoGradGuard guard;
    ParamStore<double> s(5);
    auto w = make_hefr_weights(s, "h", 6);
    double err = 0.0;
    for (int t = 0; t < 5; ++t) {
      auto v = expert_coefficients(channel_descriptor(random_tensor({2, 6, 5, 5}, 60 + t, -2, 2)), w);
      for (int n = 0; n < 2; ++n) {
        double sum = 0.0;
        for (int e = 0; e < kExpertCount; ++e) {
          const double c = v.values()[n * kExpertCount + e];
          if (c < 0.0) err = INFINITY;
          sum += c;
        }
        err = std::max(err, std::abs(sum - 1.0));
      }
    }
    out.push_back(tolerance("hefr_coefficients_on_simplex", err, 1e-12));
  }
  {
    NoGradGuard guard;
    auto m = init_weights<double>(small_model(), 3);
    zero(m.head.kernel);
    zero(m.head.bias);
    auto s = make_sample(1, 16, 11);
    auto got = forward(m, s.zf, s.y, s.mask);
    out.push_back(tolerance("forward_zero_head_is_consistent_zero_filled",
                            max_abs_diff(got.values(), data_consistency(s.zf, s.y, s.mask).values()), 1e-12));
  }
  {
    NoGradGuard guard;
    auto m = init_weights<double>(small_model(), 5);
    auto back = decode_checkpoint<double>(encode_checkpoint(m));
    auto s = make_sample(1, 16, 12);
    const auto a = forward(m, s.zf, s.y, s.mask), b = forward(back, s.zf, s.y, s.mask);
    // Checkpoints hold float32, so compare against a float-rounded model.
    double err = max_abs_diff(a.values(), b.values());
    out.push_back(tolerance("checkpoint_roundtrip", err, 1e-4));
    const auto c = forward(decode_checkpoint<double>(encode_checkpoint(back)), s.zf, s.y, s.mask);
    out.push_back(exact("checkpoint_reencode_stable", max_abs_diff(b.values(), c.values())));
  }
  {
    auto x = random_tensor({1, 2, 4, 4}, 13), g = random_tensor({1, 2, 4, 4}, 14);
    double zero_loss, const_loss;
    {
      NoGradGuard guard;
      zero_loss = l1_loss(x, x).item();
      std::vector<double> shifted(x.values().begin(), x.values().end());
      for (auto& v : shifted) v += 0.25;
      const_loss = l1_loss(Tensor<double>::from(x.shape(), shifted), x).item();
    }
    out.push_back({"l1_loss_values", zero_loss == 0.0 && std::abs(const_loss - 0.25) < 1e-15,
                   "identical " + format_sci(zero_loss) + ", shifted by 0.25 gives " + format_sci(const_loss)});
    out.push_back(from_gradcheck(
        "l1_loss_gradient", grad_check([&](const std::vector<Tensor<double>>& in) { return l1_loss(in[0], g); }, {x}, 16),
        1e-4));
  }
  {
    TrainConfig c;
    const double first = cosine_schedule(0, c), last = cosine_schedule(c.iterations - 1, c);
    const int warm = c.warm_steps(), mid = warm + (c.iterations - 1 - warm) / 2;
    const double midv = cosine_schedule(mid, c);
    const bool even = (c.iterations - 1 - warm) % 2 == 0;
    const bool ok = first == c.lr_init && std::abs(last - c.lr_final) < 1e-12 &&
                    (!even || std::abs(midv - 0.5 * (c.lr_init + c.lr_final)) < 1e-12);
    out.push_back({"cosine_schedule_endpoints", ok,
                   "lr(0) " + format_sci(first) + ", lr(final) " + format_sci(last) + ", lr(mid) " + format_sci(midv)});
  }
  {
    ParamStore<double> s(1);
    auto w = s.param("w", {1}, 1);
    w.mutable_data()[0] = 0.5;
    w.zero_grad();
    w.mutable_grad()[0] = 3.0;
    TrainConfig c;
    c.weight_decay = 0.0;
    AdamState<double> st;
    optimizer_step(s, st, 1e-3, c);
    const double delta = s.at("w").values()[0] - 0.5;
    out.push_back(tolerance("adamw_first_step_is_minus_lr_sign", std::abs(delta + 1e-3), 1e-9));
  }
  {
    std::vector<double> a(32 * 32), b(32 * 32);
    Rng rng(15, "check");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = b[i] = rng.uniform();
    const double ss = ssim(a, b, 32, 32, 1.0), n = nmse(a, b);
    out.push_back({"metrics_identity", ss == 1.0 && n == 0.0 && std::isinf(psnr(a, b)),
                   "ssim " + format_sci(ss) + ", nmse " + format_sci(n)});
  }
  {
    NoGradGuard guard;
    double err = 0.0, shift = 0.0;
    for (int t = 0; t < 10; ++t) {
      auto img = random_tensor({1, 2, 16, 16}, 700 + t);
      std::vector<double> full = highpass_residual(img, 0.0);
      for (double cut : {0.0, 1.0, 3.0, 5.5, 8.0, 12.0}) {
        const auto hp = highpass_residual(img, cut);
        // Low part by direct subtraction in k-space.
        auto k = fft2(img);
        std::vector<double> kv(k.values().begin(), k.values().end());
        for (int r = 0; r < 16; ++r)
          for (int c = 0; c < 16; ++c)
            if (!(std::floor(frequency_radius(r, c, 16, 16)) < cut)) kv[r * 16 + c] = kv[256 + r * 16 + c] = 0.0;
        auto low = ifft2(Tensor<double>::from(k.shape(), kv));
        double e_all = 0.0, e_hp = 0.0, e_lo = 0.0;
        for (std::size_t i = 0; i < 256; ++i) {
          e_all += full[i] * full[i];
          e_hp += hp[i] * hp[i];
          e_lo += low.values()[i] * low.values()[i] + low.values()[256 + i] * low.values()[256 + i];
        }
        err = std::max(err, std::abs(e_all - e_hp - e_lo) / e_all);
      }
      std::vector<double> rolled(img.numel());
      for (int ch = 0; ch < 2; ++ch)
        for (int r = 0; r < 16; ++r)
          for (int c = 0; c < 16; ++c) rolled[(ch * 16 + (r + 3) % 16) * 16 + (c + 5) % 16] = img.values()[(ch * 16 + r) * 16 + c];
      shift = std::max(shift, max_abs_diff(radial_spectrum(img), radial_spectrum(Tensor<double>::from(img.shape(), rolled))));
    }
    out.push_back(tolerance("highpass_parseval_split", err, 1e-8));
    out.push_back(tolerance("radial_spectrum_translation_invariant", shift, 1e-8));
  }
  {
    NoGradGuard guard;
    auto x = Tensor<double>::full({1, 1, 16, 16}, 2.0);
    const auto sp = radial_spectrum(x);
    bool ok = sp.size() == 8 && sp[0] > 0.0;
    for (std::size_t i = 1; i < sp.size(); ++i) ok = ok && sp[i] < -10.0;
    out.push_back({"radial_spectrum_constant_is_dc_only", ok, "bin0 " + format_sci(sp[0]) + ", bin1 " + format_sci(sp[1])});
  }
  {
    const auto a = make_record(5, Split::train, 3, 32, MaskKind::cartesian, 4.0);
    const auto b = make_record(5, Split::train, 3, 32, MaskKind::cartesian, 4.0);
    NoGradGuard guard;
    auto dc = data_consistency(a.zero_filled, a.y, a.mask);
    out.push_back({"dataset_record_deterministic_and_consistent",
                   a.gt.values() == b.gt.values() && a.y.values() == b.y.values() &&
                       max_abs_diff(dc.values(), a.zero_filled.values()) < 1e-12,
                   "record (train, 3) regenerated"});
  }
  return out;
}

struct SuiteReport {
  std::string name;
  std::vector<CheckResult> checks;
};

/// Everything `selftest` runs, in order.
inline std::vector<SuiteReport> full_selftest(const std::function<void(const std::string&)>& progress = {}) {
  std::vector<SuiteReport> out;
  auto run = [&](const char* name, auto&& fn) {
    if (progress) progress(std::string("running ") + name);
    out.push_back({name, fn()});
  };
  run("gradients", [] { return gradient_suite(); });
  run("oracles", [] { return equivalence_oracles(); });
  run("identities", [] { return structural_identities(); });
  run("masks", [] { return mask_statistics(); });
  run("complexity", [] { return complexity_bookkeeping(); });
  run("invariants", [] { return module_invariants(); });
  return out;
}

}  // namespace fps
