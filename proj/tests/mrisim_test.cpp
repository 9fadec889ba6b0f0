#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "fps/mrisim.hpp"
#include "test_util.hpp"

using namespace fps;
using fps::testing::max_abs_diff;

namespace {

double energy(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

std::vector<double> magnitudes(const Tensor<double>& t) {
  const std::size_t hw = t.numel() / 2;
  std::vector<double> m(hw);
  for (std::size_t i = 0; i < hw; ++i) m[i] = std::hypot(t.values()[i], t.values()[hw + i]);
  return m;
}

int column_count(const SamplingMask& m) {
  int n = 0;
  for (int c = 0; c < m.size; ++c) n += m.at(0, c) == 1.0;
  return n;
}

}  // namespace

TEST(Phantom, DeterministicAndBounded) {
  auto a = make_phantom(5, 32), b = make_phantom(5, 32), c = make_phantom(6, 32);
  EXPECT_EQ(max_abs_diff(a.values(), b.values()), 0.0);
  EXPECT_GT(max_abs_diff(a.values(), c.values()), 0.0);
  double mean = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto mag = magnitudes(make_phantom(s, 32));
    for (double v : mag) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0 + 1e-12);
    }
    double m = 0.0;
    for (double v : mag) m += v;
    mean += m / mag.size() / 100.0;
  }
  EXPECT_GE(mean, 0.05);
  EXPECT_LE(mean, 0.6);
  EXPECT_THROW(make_phantom(1, 24), ConfigError);
}

TEST(Phantom, PhaseIsNontrivial) {
  auto p = make_phantom(3, 32);
  EXPECT_GT(energy(std::span(p.values()).subspan(32 * 32)), 1.0);
}

TEST(CartesianMask, ColumnBudgetAndCentre) {
  auto m = cartesian_mask(64, 4.0, 0.08, 3);
  EXPECT_EQ(column_count(m), 16);
  // Five lowest frequencies: 0, +1, -1, +2, -2.
  for (int c : {0, 1, 63, 2, 62}) EXPECT_EQ(m.at(0, c), 1.0) << c;
  int central = 0;
  for (int c : {0, 1, 63, 2, 62}) central += m.at(0, c) == 1.0;
  EXPECT_EQ(central, 5);
  for (int r = 1; r < 64; ++r)
    for (int c = 0; c < 64; ++c) ASSERT_EQ(m.at(r, c), m.at(0, c));
}

TEST(CartesianMask, DeterministicPerSeed) {
  auto a = cartesian_mask(32, 4.0, 0.08, 1), b = cartesian_mask(32, 4.0, 0.08, 1), c = cartesian_mask(32, 4.0, 0.08, 2);
  EXPECT_EQ(a.values, b.values);
  EXPECT_NE(a.values, c.values);
}

TEST(CartesianMask, RejectsOversizedCentre) {
  EXPECT_THROW(cartesian_mask(32, 8.0, 0.5, 1), ConfigError);
  EXPECT_THROW(cartesian_mask(30, 4.0, 0.08, 1), ConfigError);
}

TEST(RadialAndRandomMasks, DcSampledAndDeterministic) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto r = radial_mask(32, 5.0, s), q = random_mask(32, 5.0, s);
    EXPECT_EQ(r.at(0, 0), 1.0);
    EXPECT_EQ(q.at(0, 0), 1.0);
    EXPECT_EQ(r.values, radial_mask(32, 5.0, s).values);
    EXPECT_EQ(q.values, random_mask(32, 5.0, s).values);
  }
  EXPECT_NE(random_mask(32, 5.0, 1).values, random_mask(32, 5.0, 2).values);
}

TEST(RadialAndRandomMasks, FractionAtAf5On64) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    EXPECT_GE(radial_mask(64, 5.0, s).fraction(), 0.18);
    EXPECT_LE(radial_mask(64, 5.0, s).fraction(), 0.22);
    EXPECT_GE(random_mask(64, 5.0, s).fraction(), 0.18);
    EXPECT_LE(random_mask(64, 5.0, s).fraction(), 0.22);
  }
}

TEST(Masks, FractionToleranceAllKinds) {
  for (int size : {32, 64})
    for (auto kind : {MaskKind::cartesian, MaskKind::radial, MaskKind::random})
      for (double af : {4.0, 5.0, 8.0, 10.0})
        for (std::uint64_t s = 0; s < 100; ++s) {
          const auto m = make_mask(kind, size, af, s);
          const double f = m.fraction() * af;
          ASSERT_GE(f, 0.9) << mask_kind_name(kind) << " af " << af << " seed " << s;
          ASSERT_LE(f, 1.1) << mask_kind_name(kind) << " af " << af << " seed " << s;
          for (double v : m.values) ASSERT_TRUE(v == 0.0 || v == 1.0);
          if (kind == MaskKind::cartesian) ASSERT_EQ(column_count(m), std::lround(size / af));
        }
}

TEST(Undersample, FullMaskIsIdentity) {
  auto gt = make_phantom(2, 32);
  auto u = undersample(gt, Tensor<double>::full({1, 1, 32, 32}, 1.0));
  EXPECT_LT(max_abs_diff(u.zero_filled.values(), gt.values()), 1e-10);
}

TEST(Undersample, LosesInformationAndKeepsEnergy) {
  for (double af : {4.0, 8.0}) {
    auto gt = make_phantom(4, 32);
    auto u = undersample(gt, mask_tensor<double>(cartesian_mask(32, af, default_center_fraction(af), 1)));
    double err = 0.0;
    for (std::size_t i = 0; i < gt.numel(); ++i) err += std::pow(u.zero_filled.values()[i] - gt.values()[i], 2);
    EXPECT_GT(err, 1e-6);
    EXPECT_NEAR(energy(u.y.values()), energy(u.zero_filled.values()), 1e-10);
  }
}

TEST(Dataset, CountsAndDisjointSeeds) {
  EXPECT_EQ(make_dataset(5, 16, MaskKind::random, 4.0, 9).size(), 5u);
  std::set<std::uint64_t> seen;
  for (auto s : {Split::train, Split::val, Split::test})
    for (int i = 0; i < 1000; ++i) EXPECT_TRUE(seen.insert(phantom_id(s, i)).second);
  auto train = make_dataset(3, 16, MaskKind::cartesian, 4.0, 9, Split::train);
  auto test = make_dataset(3, 16, MaskKind::cartesian, 4.0, 9, Split::test);
  for (int i = 0; i < 3; ++i) EXPECT_GT(max_abs_diff(train[i].gt.values(), test[i].gt.values()), 0.0);
}

TEST(Dataset, RegenerationIsByteIdentical) {
  const auto root = std::filesystem::temp_directory_path() / "fps_dataset_test";
  std::filesystem::remove_all(root);
  DatasetInfo info{11, 16, MaskKind::radial, 5.0, 3, Split::val};
  write_split(root / "a", info);
  write_split(root / "b", info);
  for (const auto& e : std::filesystem::directory_iterator(root / "a"))
    EXPECT_EQ(read_file(e.path()), read_file(root / "b" / e.path().filename())) << e.path();
  auto loaded = load_split<double>(resolve_split(root / "a", Split::test));
  EXPECT_EQ(loaded.info.count, 3);
  EXPECT_EQ(loaded.info.split, Split::val);
  EXPECT_EQ(manifest_text(loaded.info), manifest_text(info));
  auto direct = make_record(11, Split::val, 2, 16, MaskKind::radial, 5.0);
  EXPECT_LT(max_abs_diff(loaded.records[2].gt.values(), direct.gt.values()), 1e-7);
  EXPECT_EQ(max_abs_diff(loaded.records[2].mask.values(), direct.mask.values()), 0.0);
  EXPECT_THROW(load_split<double>(root / "missing"), IoError);
  EXPECT_THROW(parse_manifest("size = 16\ncolour = red\n"), ConfigError);
  std::filesystem::remove_all(root);
}
