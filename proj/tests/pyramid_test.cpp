#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "fps/core/conv.hpp"
#include "fps/core/gradcheck.hpp"
#include "fps/pyramid.hpp"
#include "test_util.hpp"

using namespace fps;
using fps::testing::max_abs_diff;
using fps::testing::random_tensor;

namespace {

double spatial_variance(std::span<const double> v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size());
}

}  // namespace

TEST(GaussianKernel, SumsToOneAndIsSymmetric) {
  for (double sigma : {0.5, 1.0, 2.0, 3.7}) {
    const auto g = gaussian_kernel(sigma);
    const int k = static_cast<int>(std::lround(std::sqrt(static_cast<double>(g.size()))));
    EXPECT_EQ(k, 2 * static_cast<int>(std::ceil(3 * sigma)) + 1);
    double s = 0.0;
    for (double v : g) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) {
        EXPECT_EQ(g[i * k + j], g[j * k + i]);
        EXPECT_EQ(g[i * k + j], g[(k - 1 - i) * k + (k - 1 - j)]);
      }
  }
}

TEST(GaussianKernel, UnitSigmaCenter) {
  double s = 0.0;
  for (int i = -3; i <= 3; ++i)
    for (int j = -3; j <= 3; ++j) s += std::exp(-(i * i + j * j) / 2.0);
  const double center = 1.0 / s;
  const auto g = gaussian_kernel(1.0);
  EXPECT_NEAR(g[3 * 7 + 3], center, 1e-15);
  EXPECT_NEAR(g[3 * 7 + 3], 0.159, 5e-4);
}

TEST(GaussianKernel, RejectsNonPositiveSigma) {
  EXPECT_THROW(gaussian_kernel(0.0), std::invalid_argument);
  EXPECT_THROW(gaussian_kernel(-1.0), std::invalid_argument);
}

TEST(GaussianStack, ConstantInputStaysConstant) {
  auto x = Tensor<double>::full({1, 2, 16, 16}, 0.7);
  for (const auto& level : build_gaussian_stack(x, default_sigmas(3)))
    for (double v : level.data()) EXPECT_NEAR(v, 0.7, 1e-12);
}

TEST(GaussianStack, VarianceNonIncreasing) {
  auto x = random_tensor({1, 1, 32, 32}, 3);
  const auto stack = build_gaussian_stack(x, {1, 2, 4, 8});
  double prev = spatial_variance(x.data());
  for (const auto& level : stack) {
    const double v = spatial_variance(level.data());
    EXPECT_LE(v, prev + 1e-15);
    prev = v;
  }
}

TEST(GaussianStack, ImpulseReproducesKernel) {
  auto x = Tensor<double>::zeros({1, 1, 15, 15});
  x.mutable_data()[7 * 15 + 7] = 1.0;
  const std::vector<double> sigmas{1.0, 2.0};
  const auto stack = build_gaussian_stack(x, sigmas);
  for (std::size_t m = 0; m < sigmas.size(); ++m) {
    const auto g = gaussian_kernel(sigmas[m]);
    const int r = gaussian_radius(sigmas[m]), k = 2 * r + 1;
    for (int i = 0; i < 15; ++i)
      for (int j = 0; j < 15; ++j) {
        const int di = i - 7 + r, dj = j - 7 + r;
        const double expect = (di >= 0 && di < k && dj >= 0 && dj < k) ? g[di * k + dj] : 0.0;
        EXPECT_NEAR(stack[m].data()[i * 15 + j], expect, 1e-15);
      }
  }
}

TEST(GaussianStack, SeparableMatchesFullDepthwiseConv) {
  auto x = random_tensor({2, 3, 16, 16}, 11);
  for (double sigma : {1.0, 2.0}) {
    const auto g = gaussian_kernel(sigma);
    const int k = 2 * gaussian_radius(sigma) + 1;
    std::vector<double> w;
    for (int c = 0; c < 3; ++c) w.insert(w.end(), g.begin(), g.end());
    auto kernel = Tensor<double>::from({3, 1, k, k}, w);
    auto ref = conv2d(x, kernel, nullptr, {.groups = 3});
    auto got = build_gaussian_stack(x, {sigma})[0];
    EXPECT_LT(max_abs_diff(got.data(), ref.data()), 1e-12);
  }
}

TEST(GaussianStack, RejectsUnsortedSigmas) {
  auto x = random_tensor({1, 1, 8, 8}, 1);
  EXPECT_THROW(build_gaussian_stack(x, {2.0, 1.0}), std::invalid_argument);
}

TEST(FrequencyPyramid, TelescopingOverRandomInputs) {
  for (int t = 0; t < 20; ++t) {
    auto x = random_tensor({1, 2, 16, 16}, 100 + t, -3, 3);
    const auto stack = build_gaussian_stack(x, default_sigmas(3));
    const auto p = build_frequency_pyramid(stack);
    ASSERT_EQ(p.levels.size(), 3u);
    std::vector<double> sum(x.numel(), 0.0);
    for (const auto& l : p.levels) {
      EXPECT_EQ(l.shape(), x.shape());
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += l.data()[i];
    }
    std::vector<double> expect(x.numel());
    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] = stack.back().data()[i] - stack.front().data()[i];
    EXPECT_LT(max_abs_diff(sum, expect), 1e-10);
    EXPECT_LT(max_abs_diff(p.coarse.data(), stack.back().data()), 1e-300);
  }
}

TEST(FrequencyPyramid, ConstantInputHasEmptyBands) {
  auto x = Tensor<double>::full({1, 1, 16, 16}, -2.5);
  for (const auto& l : frequency_pyramid(x, default_sigmas(3)).levels)
    for (double v : l.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(FrequencyPyramid, FinePeriodLandsInFirstBand) {
  std::vector<double> v(32 * 32);
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j) v[i * 32 + j] = std::sin(2 * std::numbers::pi * j / 4.0);
  auto x = Tensor<double>::from({1, 1, 32, 32}, v);
  const auto p = frequency_pyramid(x, {1, 2, 4, 8});
  std::vector<double> energy;
  for (const auto& l : p.levels) {
    double e = 0.0;
    for (double a : l.data()) e += a * a;
    energy.push_back(e);
  }
  EXPECT_GT(energy[0], energy[1]);
  EXPECT_GT(energy[0], energy[2]);
}

TEST(FrequencyPyramid, RejectsSingleLevelStack) {
  auto x = random_tensor({1, 1, 8, 8}, 1);
  EXPECT_THROW(build_frequency_pyramid(std::vector{x}), std::invalid_argument);
}

TEST(FrequencyPyramid, GradientMatchesFiniteDifferences) {
  auto fn = [](const std::vector<Tensor<double>>& in) {
    const auto p = frequency_pyramid(in[0], default_sigmas(3));
    return concat_channels(p.levels);
  };
  for (Shape s : {Shape{1, 2, 8, 8}, Shape{2, 1, 16, 8}, Shape{1, 3, 4, 4}}) {
    auto r = grad_check(fn, {random_tensor(s, 5)}, 40);
    EXPECT_TRUE(r.passed(1e-4)) << shape_str(s) << " " << r.max_rel_error;
  }
}
