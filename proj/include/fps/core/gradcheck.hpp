#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "fps/core/ops.hpp"
#include "fps/core/rng.hpp"
#include "fps/core/tensor.hpp"

namespace fps {

struct GradCheckResult {
  double max_rel_error = 0.0;
  int probes = 0;
  int resampled = 0;  // probes moved because the function was not smooth there
  bool finite = true;

  [[nodiscard]] bool passed(double tol) const { return finite && max_rel_error < tol; }
};

/// Compares reverse-mode gradients of `fn` against central differences.
///
/// The output is reduced to a scalar with a fixed random projection so every
/// output element contributes. Probes cycle over the inputs and pick a random
/// coordinate in each. A probe where no two neighbouring steps agree sits on
/// a kink (relu, hash boundary) and is re-drawn, up to a few times. Relative error uses max(|analytic|, |numeric|, 1e-8).
template <class Fn>
GradCheckResult grad_check(Fn&& fn, std::vector<Tensor<double>> inputs, int probe_count, std::uint64_t seed = 1,
                           double step = 1e-5) {
  GradCheckResult res;
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Rng rng(seed, "grad_check");
  std::vector<double> proj;
  {
    Tensor<double> y = fn(inputs);
    proj.resize(y.numel());
    for (auto& v : proj) v = rng.normal();
    if (!all_finite(y)) {
      res.finite = false;
      res.max_rel_error = std::numeric_limits<double>::infinity();
      return res;
    }
    dot_const(y, proj).backward();
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

  auto loss = [&]() {
    NoGradGuard guard;
    Tensor<double> y = fn(inputs);
    long double s = 0.0L;
    for (std::size_t i = 0; i < proj.size(); ++i) s += static_cast<long double>(proj[i]) * y.values()[i];
    return s;
  };
  auto quotient = [&](Tensor<double>& t, std::size_t idx, double h) {
    double& v = t.mutable_data()[idx];
    const double orig = v;
    // Divide by the step actually taken, not the nominal one.
    const double up = orig + h, down = orig - h;
    v = up;
    const long double lp = loss();
    v = down;
    const long double lm = loss();
    v = orig;
    return static_cast<double>((lp - lm) / (static_cast<long double>(up) - down));
  };

  if (inputs.empty()) return res;
  // Steps from 100*step down to step/100. Large steps lose to curvature and to
  // hash-bucket or relu crossings; small ones lose to roundoff. The estimate
  // is taken from the adjacent pair that agrees best.
  constexpr int kLadder = 5;
  for (int p = 0; p < probe_count; ++p) {
    const std::size_t which = static_cast<std::size_t>(p) % inputs.size();
    auto& t = inputs[which];
    double rel = 0.0;
    for (int attempt = 0; attempt < 6; ++attempt) {
      const std::size_t idx = rng.below(t.numel());
      double q[kLadder];
      double h = step * 100.0;
      for (int i = 0; i < kLadder; ++i, h /= 10.0) {
        q[i] = quotient(t, idx, h);
        if (!std::isfinite(q[i])) {
          res.finite = false;
          res.max_rel_error = std::numeric_limits<double>::infinity();
          return res;
        }
      }
      double spread = std::numeric_limits<double>::infinity(), num = q[0];
      for (int i = 0; i + 1 < kLadder; ++i) {
        const double d = std::abs(q[i] - q[i + 1]) / std::max({std::abs(q[i]), std::abs(q[i + 1]), 1e-6});
        if (d < spread) {
          spread = d;
          num = q[i];
        }
      }
      const double a = analytic[which][idx];
      rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8});
      if (spread < 1e-3 || attempt == 5) break;
      ++res.resampled;
    }
    res.max_rel_error = std::max(res.max_rel_error, rel);
    ++res.probes;
  }
  return res;
}

}  // namespace fps
