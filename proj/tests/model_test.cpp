#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "fps/core/gradcheck.hpp"
#include "fps/model.hpp"
#include "test_util.hpp"

using namespace fps;
using fps::testing::max_abs_diff;
using fps::testing::random_tensor;

namespace {

void fill(Tensor<double>& t, double v) {
  for (auto& x : t.mutable_data()) x = v;
}

template <class T>
Tensor<T> random_mask(int n, int h, int w, std::uint64_t seed, double p = 0.3) {
  Rng rng(seed, "mask");
  std::vector<T> v(static_cast<std::size_t>(n) * h * w);
  for (auto& x : v) x = rng.uniform() < p ? T(1) : T(0);
  return Tensor<T>::from({n, 1, h, w}, std::move(v));
}

template <class T>
Tensor<T> masked(const Tensor<T>& k, const Tensor<T>& mask) {
  return mul(k, expand_mask(mask));
}

double nmse(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return num / den;
}

ModelConfig small_config(int c0 = 8) {
  ModelConfig c;
  c.base_channels = c0;
  c.hefr_stages = 1;
  c.expert_hidden = 8;
  return c;
}

struct Sample {
  Tensor<double> gt, y, zf, mask;
};

Sample make_sample(int n, int size, std::uint64_t seed) {
  Sample s;
  s.gt = random_tensor({n, 2, size, size}, seed);
  s.mask = random_mask<double>(n, size, size, seed + 100);
  s.y = masked(fft2(s.gt), s.mask);
  s.zf = ifft2(s.y);
  return s;
}

}  // namespace

TEST(FpsBlock, ZeroedOutputsGiveIdentity) {
  ModelConfig cfg = small_config();
  ParamStore<double> store(1);
  auto w = make_fps_block_weights(store, "b", 8, 2, cfg);
  fill(w.fusion.pointwise, 0.0);
  fill(w.fusion.pointwise_bias, 0.0);
  fill(w.sdfn.fuse, 0.0);
  fill(w.sdfn.fuse_bias, 0.0);
  auto x = random_tensor({2, 8, 8, 8}, 3);
  EXPECT_EQ(max_abs_diff(fps_block(x, w, cfg).values(), x.values()), 0.0);
}

TEST(FpsBlock, ShapePreservedAtEveryLevel) {
  ModelConfig cfg = small_config();
  auto m = init_weights<double>(cfg, 5);
  for (int l = 0; l < cfg.levels(); ++l) {
    const int size = 16 >> l;
    auto x = random_tensor({1, cfg.channels(l), size, size}, 10 + l);
    for (const auto& b : m.enc[l]) EXPECT_EQ(fps_block(x, b, cfg).shape(), x.shape()) << "level " << l + 1;
  }
}

TEST(FpsBlock, GradCheck) {
  ModelConfig cfg = small_config();
  ParamStore<double> store(2);
  auto w = make_fps_block_weights(store, "b", 8, 2, cfg);
  fill(w.fusion.pointwise_bias, 0.05);
  auto r = grad_check([&](const std::vector<Tensor<double>>& in) { return fps_block(in[0], w, cfg); },
                      {random_tensor({1, 8, 8, 8}, 4), w.fmam.query[1], w.msa.value, w.fusion.depthwise, w.sdfn.expand},
                      50);
  EXPECT_TRUE(r.passed(1e-4)) << r.max_rel_error;
}

TEST(FpsBlock, AblatedVariantsGradCheck) {
  for (int v = 0; v < 3; ++v) {
    ModelConfig cfg = small_config();
    cfg.fmam_on = v != 0;
    cfg.spam_on = v != 1;
    cfg.sdfn_on = v != 2;
    ParamStore<double> store(2);
    auto w = make_fps_block_weights(store, "b", 8, 2, cfg);
    auto r = grad_check([&](const std::vector<Tensor<double>>& in) { return fps_block(in[0], w, cfg); },
                        {random_tensor({1, 8, 8, 8}, 4), w.msa.query}, 20);
    EXPECT_TRUE(r.passed(1e-4)) << cfg.variant() << " " << r.max_rel_error;
  }
}

TEST(DataConsistency, SampledLocationsMatchMeasurement) {
  auto s = make_sample(2, 16, 1);
  auto x = random_tensor({2, 2, 16, 16}, 9);
  auto k = fft2(data_consistency(x, s.y, s.mask));
  auto m2 = expand_mask(s.mask);
  double worst = 0.0;
  for (std::size_t i = 0; i < k.numel(); ++i)
    if (m2.values()[i] == 1.0) worst = std::max(worst, std::abs(k.values()[i] - s.y.values()[i]));
  EXPECT_LT(worst, 1e-10);
}

TEST(DataConsistency, Idempotent) {
  auto s = make_sample(1, 32, 2);
  auto x = random_tensor({1, 2, 32, 32}, 8);
  auto once = data_consistency(x, s.y, s.mask);
  auto twice = data_consistency(once, s.y, s.mask);
  EXPECT_LT(max_abs_diff(once.values(), twice.values()), 1e-10);
}

TEST(DataConsistency, FullMaskReplacesPrediction) {
  auto y = random_tensor({1, 2, 16, 16}, 3);
  auto mask = Tensor<double>::full({1, 1, 16, 16}, 1.0);
  auto expected = ifft2(y);
  for (std::uint64_t seed : {4, 5}) {
    auto out = data_consistency(random_tensor({1, 2, 16, 16}, seed), y, mask);
    EXPECT_LT(max_abs_diff(out.values(), expected.values()), 1e-12);
  }
}

TEST(DataConsistency, RejectsBadInputs) {
  auto x = random_tensor({1, 2, 16, 16}, 1);
  EXPECT_THROW(data_consistency(x, random_tensor({1, 2, 8, 16}, 2), random_mask<double>(1, 16, 16, 1)), ShapeError);
  EXPECT_THROW(data_consistency(x, x, random_mask<double>(1, 8, 16, 1)), ShapeError);
  EXPECT_THROW(data_consistency(x, x, Tensor<double>::full({1, 1, 16, 16}, 0.5)), std::invalid_argument);
}

TEST(DataConsistency, GradCheck) {
  auto s = make_sample(1, 8, 6);
  auto r = grad_check([&](const std::vector<Tensor<double>>& in) { return data_consistency(in[0], s.y, s.mask); },
                      {random_tensor({1, 2, 8, 8}, 7)}, 30);
  EXPECT_TRUE(r.passed(1e-4)) << r.max_rel_error;
}

TEST(Forward, ZeroHeadReturnsConsistentZeroFilled) {
  auto m = init_weights<double>(small_config(), 3);
  fill(m.head.kernel, 0.0);
  fill(m.head.bias, 0.0);
  for (std::uint64_t seed : {11, 12, 13}) {
    auto s = make_sample(1, 16, seed);
    auto out = forward(m, s.zf, s.y, s.mask);
    auto expected = data_consistency(s.zf, s.y, s.mask);
    EXPECT_LT(max_abs_diff(out.values(), expected.values()), 1e-12);
    EXPECT_LE(nmse(out.values(), s.gt.values()), nmse(s.zf.values(), s.gt.values()) + 1e-9);
  }
}

TEST(Forward, ShapesAt32And64) {
  {
    auto m = init_weights<double>(small_config(), 1);
    auto s = make_sample(2, 32, 3);
    EXPECT_EQ(forward(m, s.zf, s.y, s.mask).shape(), (Shape{2, 2, 32, 32}));
  }
  {
    NoGradGuard guard;
    ModelConfig cfg = small_config();
    cfg.blocks = {1, 1, 1, 1};
    auto m = init_weights<float>(cfg, 1);
    auto zf = Tensor<float>::full({1, 2, 64, 64}, 0.1f);
    auto mask = random_mask<float>(1, 64, 64, 2);
    EXPECT_EQ(forward(m, zf, fft2(zf), mask).shape(), (Shape{1, 2, 64, 64}));
  }
}

TEST(Forward, RejectsBadResolution) {
  auto m = init_weights<double>(small_config(), 1);
  auto s = make_sample(1, 8, 3);
  EXPECT_THROW(forward(m, s.zf, s.y, s.mask), ConfigError);
  ModelConfig cfg = small_config();
  cfg.attention_cap = 100;
  auto capped = init_weights<double>(cfg, 1);
  auto t = make_sample(1, 16, 3);
  try {
    forward(capped, t.zf, t.y, t.mask);
    FAIL() << "expected the attention cap to reject level 1";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("level 1"), std::string::npos) << e.what();
  }
}

TEST(Forward, FullModelGradCheck) {
  auto m = init_weights<double>(small_config(8), 21);
  auto s = make_sample(1, 16, 4);
  auto r = grad_check(
      [&](const std::vector<Tensor<double>>& in) { return forward(m, in[0], s.y, s.mask); },
      {s.zf.clone(), m.store.at("embed.w"), m.store.at("enc1.0.fmam.q0"), m.store.at("enc3.1.msa.k"),
       m.store.at("hefr_in.0.w2"), m.store.at("down2.w"), m.store.at("dec4.0.sdfn.dw5b"), m.store.at("head.w")},
      40);
  EXPECT_TRUE(r.passed(1e-4)) << r.max_rel_error;
}

TEST(Forward, Deterministic) {
  auto s = make_sample(1, 16, 5);
  auto a = forward(init_weights<double>(small_config(), 7), s.zf, s.y, s.mask);
  auto b = forward(init_weights<double>(small_config(), 7), s.zf, s.y, s.mask);
  EXPECT_EQ(max_abs_diff(a.values(), b.values()), 0.0);
}

TEST(InitWeights, SeedDeterminism) {
  ModelConfig cfg;
  auto a = init_weights<float>(cfg, 1), b = init_weights<float>(cfg, 1), c = init_weights<float>(cfg, 2);
  bool any_diff = false;
  for (const auto& [name, t] : a.store.params()) {
    EXPECT_EQ(max_abs_diff(t.values(), b.store.at(name).values()), 0.0) << name;
    any_diff = any_diff || max_abs_diff(t.values(), c.store.at(name).values()) > 0.0;
  }
  EXPECT_TRUE(any_diff);
}

TEST(InitWeights, KernelStatistics) {
  auto m = init_weights<double>(ModelConfig{}, 3);
  int checked = 0;
  for (const auto& [name, t] : m.store.params()) {
    if (t.numel() < 256 || t.rank() < 2) continue;
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < t.shape().size(); ++i) fan_in *= t.shape()[i];
    double mean = 0.0, sq = 0.0;
    for (double v : t.values()) mean += v;
    mean /= t.numel();
    for (double v : t.values()) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / t.numel());
    EXPECT_NEAR(sd * std::sqrt(static_cast<double>(fan_in)), 1.0, 0.2) << name;
    ++checked;
  }
  EXPECT_GT(checked, 50);
  EXPECT_EQ(m.store.at("enc1.0.ln.g").values()[0], 1.0);
  EXPECT_EQ(m.store.at("enc1.0.ln.b").values()[0], 0.0);
}

TEST(CountParams, HandCounts) {
  ParamStore<double> empty;
  EXPECT_EQ(count_params(empty), 0u);
  ParamStore<double> one;
  make_conv(one, "c", 2, 2, 3);
  EXPECT_EQ(count_params(one), 38u);
}

TEST(CountParams, MatchesCheckpointWalk) {
  auto m = init_weights<float>(ModelConfig{}, 1);
  const std::string bytes = encode_checkpoint(m);
  // Second traversal: parse the record headers and sum trainable extents.
  std::size_t pos = bytes.find('\n', kCheckpointMagic.size()) + 1;
  pos += model_config_text(m.cfg).size();
  std::size_t total = 0;
  int records = 0;
  while (pos < bytes.size()) {
    const std::size_t nl = bytes.find('\n', pos);
    std::istringstream head(bytes.substr(pos, nl - pos));
    std::string tag, name;
    int trainable = 0;
    std::size_t len = 0;
    head >> tag >> name >> trainable >> len;
    ASSERT_EQ(tag, "tensor");
    if (trainable) total += (len - 8 - 4 * static_cast<std::size_t>(bytes[nl + 5])) / 4;
    pos = nl + 1 + len;
    ++records;
  }
  EXPECT_EQ(records, static_cast<int>(m.store.params().size() + m.store.buffers().size()));
  EXPECT_EQ(count_params(m.store), total);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ModelConfig cfg = small_config();
  cfg.hash_r = 0.75;
  cfg.sdfn_on = false;
  auto m = init_weights<float>(cfg, 9);
  const auto dir = std::filesystem::temp_directory_path() / "fps_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "m.ckpt", m);
  auto back = load_checkpoint<float>(dir / "m.ckpt");
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(m));
  EXPECT_EQ(model_config_text(back.cfg), model_config_text(cfg));
  for (const auto& [name, t] : m.store.params()) EXPECT_EQ(max_abs_diff(t.values(), back.store.at(name).values()), 0.0);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsMismatchAndGarbage) {
  auto m = init_weights<float>(small_config(), 1);
  std::string bytes = encode_checkpoint(m);
  EXPECT_THROW(decode_checkpoint<float>("nonsense"), IoError);
  EXPECT_THROW(decode_checkpoint<float>(bytes.substr(0, bytes.size() - 3)), IoError);
  const auto at = bytes.find("fmam = 1");
  bytes.replace(at, 8, "fmam = 0");
  EXPECT_THROW(decode_checkpoint<float>(bytes), ConfigError);
}

TEST(Ablation, FlagsChangeOutputsNotShapes) {
  auto s = make_sample(1, 16, 8);
  ModelConfig base = small_config();
  auto full = init_weights<double>(base, 4);
  auto ref = forward(full, s.zf, s.y, s.mask);
  for (int v = 0; v < 4; ++v) {
    ModelConfig cfg = base;
    (v == 0 ? cfg.fmam_on : v == 1 ? cfg.spam_on : v == 2 ? cfg.sdfn_on : cfg.hefr_on) = false;
    auto m = init_weights<double>(cfg, 4);
    auto out = forward(m, s.zf, s.y, s.mask);
    EXPECT_EQ(out.shape(), ref.shape()) << cfg.variant();
    EXPECT_GT(max_abs_diff(out.values(), ref.values()), 1e-8) << cfg.variant();
    if (v != 1) EXPECT_NE(count_params(m.store), count_params(full.store)) << cfg.variant();
  }
}

TEST(ModelConfig, TextRoundTripAndValidation) {
  ModelConfig cfg;
  cfg.blocks = {2, 1, 1, 3};
  cfg.hash_r = 0.3;
  cfg.normalize_scores = true;
  cfg.spam_on = false;
  EXPECT_EQ(model_config_text(parse_model_config(model_config_text(cfg))), model_config_text(cfg));
  EXPECT_EQ(cfg.variant(), "no_spam");
  EXPECT_THROW(parse_model_config("heads = 1,2,4,7\n"), ConfigError);
  EXPECT_THROW(parse_model_config("colour = blue\n"), ConfigError);
  EXPECT_THROW(parse_model_config("groups = x\n"), ConfigError);
}
