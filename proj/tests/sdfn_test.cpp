#include <gtest/gtest.h>

#include "fps/core/gradcheck.hpp"
#include "fps/sdfn.hpp"
#include "test_util.hpp"

using namespace fps;
using fps::testing::max_abs_diff;
using fps::testing::random_tensor;

namespace {

void fill(Tensor<double>& t, double v) {
  for (auto& x : t.mutable_data()) x = v;
}

// Depthwise kernel that passes every channel through unchanged.
void make_delta(Tensor<double>& k) {
  fill(k, 0.0);
  const int size = k.dim(2);
  const std::size_t per = static_cast<std::size_t>(size) * size;
  for (int c = 0; c < k.dim(0); ++c) k.mutable_data()[c * per + per / 2] = 1.0;
}

std::vector<double> channel_slice(const Tensor<double>& t, int first, int count) {
  const std::size_t hw = static_cast<std::size_t>(t.dim(2)) * t.dim(3);
  std::vector<double> out;
  for (int n = 0; n < t.dim(0); ++n) {
    const double* base = t.values().data() + (static_cast<std::size_t>(n) * t.dim(1) + first) * hw;
    out.insert(out.end(), base, base + count * hw);
  }
  return out;
}

}  // namespace

TEST(Sdfn, ZeroFuseIsIdentity) {
  ParamStore<double> store(3);
  auto w = make_sdfn_weights(store, "s", 4, 2);
  fill(w.fuse, 0.0);
  fill(w.fuse_bias, 0.0);
  auto x = random_tensor({2, 4, 6, 6}, 1);
  auto y = sdfn_forward(x, w);
  EXPECT_EQ(max_abs_diff(y.values(), x.values()), 0.0);
}

TEST(Sdfn, ChannelWidths) {
  ParamStore<double> store(4);
  auto w = make_sdfn_weights(store, "s", 8, 2);
  auto t = sdfn_trace(random_tensor({2, 8, 8, 8}, 2), w);
  EXPECT_EQ(t.expanded.dim(1), 16);
  EXPECT_EQ(t.p1.dim(1), 16);
  EXPECT_EQ(t.s1.dim(1), 16);
  EXPECT_EQ(t.p2.dim(1), 32);
  EXPECT_EQ(t.s2.dim(1), 32);
  EXPECT_EQ(t.out.shape(), (Shape{2, 8, 8, 8}));
  for (int c : {1, 3, 5})
    for (int r : {1, 3}) {
      ParamStore<double> s2(1);
      auto w2 = make_sdfn_weights(s2, "s", c, r);
      auto t2 = sdfn_trace(random_tensor({1, c, 6, 6}, 5), w2);
      EXPECT_EQ(t2.expanded.dim(1), r * c);
      EXPECT_EQ(t2.p2.dim(1), 2 * r * c);
      EXPECT_EQ(t2.s2.dim(1), 2 * r * c);
      EXPECT_EQ(t2.out.dim(1), c);
    }
}

TEST(Sdfn, RejectsZeroRatio) {
  ParamStore<double> store(1);
  EXPECT_THROW(make_sdfn_weights(store, "s", 4, 0), std::invalid_argument);
}

TEST(Sdfn, StageTwoConcatenationOrder) {
  ParamStore<double> store(9);
  auto w = make_sdfn_weights(store, "s", 3, 2);
  make_delta(w.dw3_b);
  make_delta(w.dw5_b);
  auto t = sdfn_trace(random_tensor({1, 3, 7, 7}, 6), w);
  const int rc = 6;
  // The two stage-1 branches differ, so a swapped concatenation would show.
  ASSERT_GT(max_abs_diff(t.p1.values(), t.s1.values()), 1e-3);
  EXPECT_EQ(max_abs_diff(channel_slice(t.p2, 0, rc), t.p1.values()), 0.0);
  EXPECT_EQ(max_abs_diff(channel_slice(t.p2, rc, rc), t.s1.values()), 0.0);
  EXPECT_EQ(max_abs_diff(channel_slice(t.s2, 0, rc), t.s1.values()), 0.0);
  EXPECT_EQ(max_abs_diff(channel_slice(t.s2, rc, rc), t.p1.values()), 0.0);
}

TEST(Sdfn, GradCheck) {
  ParamStore<double> store(11);
  auto w = make_sdfn_weights(store, "s", 4, 2);
  fill(w.fuse_bias, 0.1);
  auto r = grad_check([&](const std::vector<Tensor<double>>& in) { return sdfn_forward(in[0], w); },
                      {random_tensor({1, 4, 6, 6}, 7), w.expand, w.dw3_a, w.dw5_b, w.fuse, w.ln_gamma}, 60);
  EXPECT_TRUE(r.passed(1e-4)) << r.max_rel_error;
}

TEST(FeedForward, ZeroOutputIsIdentity) {
  ParamStore<double> store(2);
  auto w = make_ffn_weights(store, "f", 4, 2);
  EXPECT_EQ(w.w1.dim(0), 8);
  fill(w.w2, 0.0);
  auto x = random_tensor({1, 4, 5, 5}, 3);
  EXPECT_EQ(max_abs_diff(ffn_forward(x, w).values(), x.values()), 0.0);
}

TEST(FeedForward, GradCheck) {
  ParamStore<double> store(2);
  auto w = make_ffn_weights(store, "f", 4, 2);
  auto r = grad_check([&](const std::vector<Tensor<double>>& in) { return ffn_forward(in[0], w); },
                      {random_tensor({1, 4, 5, 5}, 4), w.w1, w.w2}, 30);
  EXPECT_TRUE(r.passed(1e-4)) << r.max_rel_error;
}
