#include <gtest/gtest.h>

#include <cmath>

#include "fps/metrics.hpp"
#include "test_util.hpp"

using namespace fps;

namespace {

std::vector<double> random_image(int n, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed, "image");
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Straightforward per-window SSIM, two passes per window.
double ssim_reference(const std::vector<double>& a, const std::vector<double>& b, int h, int w, double range) {
  const int k = 7;
  const double c1 = std::pow(0.01 * range, 2), c2 = std::pow(0.03 * range, 2);
  double total = 0.0;
  int windows = 0;
  for (int r = 0; r + k <= h; ++r)
    for (int c = 0; c + k <= w; ++c) {
      double ma = 0, mb = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          ma += a[(r + i) * w + c + j];
          mb += b[(r + i) * w + c + j];
        }
      ma /= k * k;
      mb /= k * k;
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          const double da = a[(r + i) * w + c + j] - ma, db = b[(r + i) * w + c + j] - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= k * k - 1;
      vb /= k * k - 1;
      cov /= k * k - 1;
      total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++windows;
    }
  return total / windows;
}

}  // namespace

TEST(Nmse, Examples) {
  const std::vector<double> x{0.0, 1.0}, xh{0.0, 0.5};
  EXPECT_DOUBLE_EQ(nmse(x, x), 0.0);
  EXPECT_DOUBLE_EQ(nmse(xh, x), 0.25);
  const auto a = random_image(64, 1), b = random_image(64, 2);
  std::vector<double> as(a), bs(b);
  for (auto& v : as) v *= -3.5;
  for (auto& v : bs) v *= -3.5;
  EXPECT_NEAR(nmse(as, bs), nmse(a, b), 1e-14);
  EXPECT_THROW(nmse(x, std::vector<double>{0.0, 0.0}), std::invalid_argument);
}

TEST(Psnr, Examples) {
  const std::vector<double> x{0.0, 1.0}, xh{0.0, 0.5};
  EXPECT_TRUE(std::isinf(psnr(x, x)));
  EXPECT_NEAR(psnr(xh, x, 1.0), 10.0 * std::log10(1.0 / 0.125), 1e-12);
  EXPECT_NEAR(psnr(xh, x, 1.0), 9.031, 5e-4);
  std::vector<double> xs{2.0, 3.0}, xhs{2.0, 2.5};
  EXPECT_NEAR(psnr(xhs, xs, 1.0), psnr(xh, x, 1.0), 1e-12);
  MetricsReport r;
  r.add({"same", nmse(x, x), psnr(x, x), 1.0});
  r.finalize();
  EXPECT_NE(metrics_csv(r).find("same,0,99.000000,1.000000000"), std::string::npos) << metrics_csv(r);
}

TEST(Psnr, DecreasesWithNoise) {
  const auto x = random_image(256, 3);
  double prev = INFINITY;
  for (double amp : {0.01, 0.02, 0.05, 0.1, 0.2}) {
    auto noise = random_image(256, 4, -1.0, 1.0);
    std::vector<double> y(x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += amp * noise[i];
    const double p = psnr(y, x);
    EXPECT_LT(p, prev);
    prev = p;
  }
}

TEST(Ssim, IdenticalInvertedAndRejections) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto x = random_image(16 * 16, s, -2.0, 2.0);
    EXPECT_NEAR(ssim(x, x, 16, 16, max_value(x)), 1.0, 1e-9);
    EXPECT_EQ(nmse(x, x), 0.0);
  }
  const auto x = random_image(16 * 16, 7);
  std::vector<double> inv(x);
  for (auto& v : inv) v = 1.0 - v;
  EXPECT_LT(ssim(inv, x, 16, 16, 1.0), 1.0);
  EXPECT_THROW(ssim(std::vector<double>(36, 1.0), std::vector<double>(36, 1.0), 6, 6, 1.0), std::invalid_argument);
}

TEST(Ssim, MatchesSlidingWindowReference) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto a = random_image(16 * 16, 10 + s), b = random_image(16 * 16, 20 + s);
    EXPECT_NEAR(ssim(a, b, 16, 16, max_value(b)), ssim_reference(a, b, 16, 16, max_value(b)), 1e-7);
  }
  const auto a = random_image(12 * 20, 1), b = random_image(12 * 20, 2);
  EXPECT_NEAR(ssim(a, b, 12, 20, 1.0), ssim_reference(a, b, 12, 20, 1.0), 1e-7);
}

TEST(Report, AggregatesAndCsvLayout) {
  MetricsReport r;
  r.add({"0", 0.1, 30.0, 0.9});
  r.add({"1", 0.3, 20.0, 0.7});
  r.finalize();
  EXPECT_DOUBLE_EQ(r.mean.nmse, 0.2);
  EXPECT_DOUBLE_EQ(r.mean.psnr_db, 25.0);
  EXPECT_NEAR(r.stddev.ssim, 0.1, 1e-12);
  const std::string csv = metrics_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "id,nmse,psnr_db,ssim");
  const auto last = csv.rfind('\n', csv.size() - 2);
  EXPECT_EQ(csv.substr(last + 1, 9), "aggregate");
}

TEST(Magnitude, OfComplexTensor) {
  auto t = Tensor<double>::from({1, 2, 1, 2}, {3.0, 0.0, 4.0, -1.0});
  const auto m = magnitude(t);
  EXPECT_DOUBLE_EQ(m[0], 5.0);
  EXPECT_DOUBLE_EQ(m[1], 1.0);
}
