#pragma once

// Synthetic single-coil data. Masks and k-space use the unshifted FFT layout:
// the DC frequency sits at index (0, 0) and low frequencies wrap around the
// edges.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "fps/core/fft.hpp"
#include "fps/core/ops.hpp"
#include "fps/core/rng.hpp"
#include "fps/io/config.hpp"
#include "fps/io/fpt1.hpp"

namespace fps {

enum class MaskKind { cartesian, radial, random };

inline std::string mask_kind_name(MaskKind k) {
  switch (k) {
    case MaskKind::cartesian: return "cartesian";
    case MaskKind::radial: return "radial";
    case MaskKind::random: return "random";
  }
  return "?";
}

inline MaskKind parse_mask_kind(const std::string& s) {
  if (s == "cartesian") return MaskKind::cartesian;
  if (s == "radial") return MaskKind::radial;
  if (s == "random") return MaskKind::random;
  throw ConfigError("unknown mask kind '" + s + "' (expected cartesian, radial or random)");
}

struct SamplingMask {
  int size = 0;
  std::vector<double> values;  // size x size, row-major, entries 0 or 1
  double af = 0.0;
  MaskKind kind = MaskKind::cartesian;
  std::uint64_t seed = 0;

  [[nodiscard]] double fraction() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
  }
  [[nodiscard]] double at(int row, int col) const { return values[static_cast<std::size_t>(row) * size + col]; }
};

namespace detail {

inline void require_size(int size, const char* what) {
  if (!is_power_of_two(size)) throw ConfigError(std::string(what) + ": size " + std::to_string(size) + " is not a power of two");
}

/// Signed frequency index of FFT bin i on an n-point grid.
inline int signed_freq(int i, int n) { return i <= n / 2 ? i : i - n; }

}  // namespace detail

/// Default fully sampled centre band: 0.08 at AF 4 and 0.04 at AF 8.
inline double default_center_fraction(double af) { return 0.32 / af; }

/// Ground-truth phantom as a [1, 2, size, size] (real, imaginary) image.
/// 6 to 12 random ellipses, magnitude clipped to [0, 1], times a smooth
/// quadratic phase.
inline Tensor<double> make_phantom(std::uint64_t seed, int size) {
  detail::require_size(size, "make_phantom");
  Rng rng(seed, "phantom");
  struct Ellipse {
    double cx, cy, ax, ay, cos_t, sin_t, value;
  };
  const int count = 6 + static_cast<int>(rng.below(7));
  std::vector<Ellipse> shapes;
  for (int e = 0; e < count; ++e) {
    Ellipse el{};
    const double theta = rng.uniform(0.0, std::numbers::pi);
    el.cos_t = std::cos(theta);
    el.sin_t = std::sin(theta);
    if (e == 0) {  // head outline
      el.cx = rng.uniform(-0.05, 0.05);
      el.cy = rng.uniform(-0.05, 0.05);
      el.ax = rng.uniform(0.6, 0.85);
      el.ay = rng.uniform(0.7, 0.9);
      el.value = rng.uniform(0.6, 1.0);
    } else {
      el.cx = rng.uniform(-0.45, 0.45);
      el.cy = rng.uniform(-0.45, 0.45);
      el.ax = rng.uniform(0.05, 0.35);
      el.ay = rng.uniform(0.05, 0.35);
      el.value = rng.uniform(-0.4, 0.4);
    }
    shapes.push_back(el);
  }
  double phase[6];
  for (auto& p : phase) p = rng.uniform(-0.5, 0.5);

  const std::size_t hw = static_cast<std::size_t>(size) * size;
  std::vector<double> out(2 * hw);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      const double x = (2.0 * c + 1.0) / size - 1.0;
      const double y = (2.0 * r + 1.0) / size - 1.0;
      double mag = 0.0;
      for (const auto& el : shapes) {
        const double dx = x - el.cx, dy = y - el.cy;
        const double u = (dx * el.cos_t + dy * el.sin_t) / el.ax;
        const double v = (-dx * el.sin_t + dy * el.cos_t) / el.ay;
        if (u * u + v * v <= 1.0) mag += el.value;
      }
      mag = std::clamp(mag, 0.0, 1.0);
      const double phi = std::numbers::pi * (phase[0] + phase[1] * x + phase[2] * y + phase[3] * x * y +
                                             phase[4] * x * x + phase[5] * y * y);
      out[r * size + c] = mag * std::cos(phi);
      out[hw + r * size + c] = mag * std::sin(phi);
    }
  return Tensor<double>::from({1, 2, size, size}, std::move(out));
}

/// 1-D Cartesian mask: whole columns, constant along rows. The centre band of
/// round(cf * W) low-frequency columns is always kept; the rest of the
/// round(W / af) budget is drawn uniformly without replacement.
inline SamplingMask cartesian_mask(int size, double af, double center_fraction, std::uint64_t seed) {
  detail::require_size(size, "cartesian_mask");
  if (!(af >= 1.0)) throw ConfigError("cartesian_mask: acceleration factor must be at least 1");
  const int budget = static_cast<int>(std::lround(size / af));
  const int center = static_cast<int>(std::lround(center_fraction * size));
  if (center > budget || budget < 1)
    throw ConfigError("cartesian_mask: centre band of " + std::to_string(center) + " columns exceeds the budget of " +
                      std::to_string(budget) + " at af " + format_double(af));
  std::vector<char> keep(size, 0);
  // Centre columns in order of |frequency|, positive side first on ties.
  std::vector<int> by_freq(size);
  for (int i = 0; i < size; ++i) by_freq[i] = i;
  std::stable_sort(by_freq.begin(), by_freq.end(), [size](int a, int b) {
    const int fa = detail::signed_freq(a, size), fb = detail::signed_freq(b, size);
    if (std::abs(fa) != std::abs(fb)) return std::abs(fa) < std::abs(fb);
    return fa > fb;
  });
  for (int i = 0; i < center; ++i) keep[by_freq[i]] = 1;
  std::vector<int> rest;
  for (int i = 0; i < size; ++i)
    if (!keep[i]) rest.push_back(i);
  Rng rng(seed, "cartesian_mask");
  for (int i = 0; i < budget - center; ++i) {
    const auto j = i + static_cast<int>(rng.below(rest.size() - i));
    std::swap(rest[i], rest[j]);
    keep[rest[i]] = 1;
  }
  SamplingMask m{size, std::vector<double>(static_cast<std::size_t>(size) * size), af, MaskKind::cartesian, seed};
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) m.values[static_cast<std::size_t>(r) * size + c] = keep[c];
  return m;
}

namespace detail {

/// Rasterizes `spokes` lines through the DC frequency at evenly spaced angles
/// plus `offset`.
inline std::vector<double> radial_raster(int size, int spokes, double offset) {
  std::vector<double> m(static_cast<std::size_t>(size) * size, 0.0);
  const double reach = size * 0.75;
  for (int s = 0; s < spokes; ++s) {
    const double theta = offset + std::numbers::pi * s / spokes;
    const double ct = std::cos(theta), st = std::sin(theta);
    for (double t = -reach; t <= reach; t += 0.5) {
      const int fx = static_cast<int>(std::lround(t * ct));
      const int fy = static_cast<int>(std::lround(t * st));
      if (fx < -size / 2 || fx >= size / 2 || fy < -size / 2 || fy >= size / 2) continue;
      const int col = (fx + size) % size, row = (fy + size) % size;
      m[static_cast<std::size_t>(row) * size + col] = 1.0;
    }
  }
  return m;
}

inline double fraction_of(const std::vector<double>& m) {
  double s = 0.0;
  for (double v : m) s += v;
  return s / static_cast<double>(m.size());
}

}  // namespace detail

/// Pseudo-radial spokes through the DC frequency. For a seeded angular
/// offset the spoke count is found by bisection on the sampled fraction and
/// the closer neighbour kept; at small sizes one spoke can overshoot the 10%
/// band, so further seeded offsets are tried.
inline SamplingMask radial_mask(int size, double af, std::uint64_t seed) {
  detail::require_size(size, "radial_mask");
  if (!(af > 1.0)) throw ConfigError("radial_mask: acceleration factor must exceed 1");
  Rng rng(seed, "radial_mask");
  const double target = 1.0 / af;
  for (int attempt = 0; attempt < 256; ++attempt) {
    const double offset = rng.uniform(0.0, std::numbers::pi);
    int lo = 1, hi = 4 * size;
    while (lo < hi) {
      const int mid = (lo + hi) / 2;
      if (detail::fraction_of(detail::radial_raster(size, mid, offset)) < target)
        lo = mid + 1;
      else
        hi = mid;
    }
    std::vector<double> best;
    double best_err = INFINITY;
    for (int n : {lo - 1, lo}) {
      if (n < 1) continue;
      auto m = detail::radial_raster(size, n, offset);
      const double err = std::abs(detail::fraction_of(m) - target);
      if (err < best_err) {
        best_err = err;
        best = std::move(m);
      }
    }
    if (best_err <= 0.1 * target) return {size, std::move(best), af, MaskKind::radial, seed};
  }
  throw ConfigError("radial_mask: af " + format_double(af) + " not reachable within 10% at size " + std::to_string(size));
}

/// Uniform random points with a fully kept central disk of radius size/16;
/// exactly round(size^2 / af) samples.
inline SamplingMask random_mask(int size, double af, std::uint64_t seed) {
  detail::require_size(size, "random_mask");
  if (!(af >= 1.0)) throw ConfigError("random_mask: acceleration factor must be at least 1");
  const std::size_t total = static_cast<std::size_t>(size) * size;
  const auto budget = static_cast<std::size_t>(std::llround(static_cast<double>(total) / af));
  const double radius = size / 16.0;
  std::vector<double> m(total, 0.0);
  std::vector<std::size_t> rest;
  std::size_t kept = 0;
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      const double fy = detail::signed_freq(r, size), fx = detail::signed_freq(c, size);
      const std::size_t i = static_cast<std::size_t>(r) * size + c;
      if (fx * fx + fy * fy <= radius * radius) {
        m[i] = 1.0;
        ++kept;
      } else {
        rest.push_back(i);
      }
    }
  if (kept > budget)
    throw ConfigError("random_mask: central disk alone exceeds the budget at af " + format_double(af));
  Rng rng(seed, "random_mask");
  for (std::size_t i = 0; i < budget - kept; ++i) {
    const std::size_t j = i + rng.below(rest.size() - i);
    std::swap(rest[i], rest[j]);
    m[rest[i]] = 1.0;
  }
  return {size, std::move(m), af, MaskKind::random, seed};
}

inline SamplingMask make_mask(MaskKind kind, int size, double af, std::uint64_t seed) {
  switch (kind) {
    case MaskKind::cartesian: return cartesian_mask(size, af, default_center_fraction(af), seed);
    case MaskKind::radial: return radial_mask(size, af, seed);
    case MaskKind::random: return random_mask(size, af, seed);
  }
  throw std::logic_error("unknown mask kind");
}

template <class T>
Tensor<T> mask_tensor(const SamplingMask& m) {
  return Tensor<T>::from({1, 1, m.size, m.size}, std::vector<T>(m.values.begin(), m.values.end()));
}

template <class T>
struct Undersampled {
  Tensor<T> zero_filled, y;
};

/// y = mask * F(gt); zero_filled = F^-1(y). `mask` is [N, 1, H, W].
template <class T>
Undersampled<T> undersample(const Tensor<T>& gt, const Tensor<T>& mask) {
  NoGradGuard guard;
  const Tensor<T> k = fft2(gt);
  const std::size_t hw = static_cast<std::size_t>(gt.dim(2)) * gt.dim(3);
  if (mask.numel() * 2 != k.numel()) throw ShapeError("undersample: mask does not match image");
  std::vector<T> y(k.values());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const std::size_t n = i / (2 * hw), p = i % hw;
    y[i] *= mask.values()[n * hw + p];
  }
  Tensor<T> yt = Tensor<T>::from(gt.shape(), std::move(y));
  return {ifft2(yt), yt};
}

// ------------------------------------------------------------------ dataset

struct Record {
  Tensor<double> gt, zero_filled, y, mask;
};

enum class Split { train, val, test };

inline std::string split_name(Split s) {
  return s == Split::train ? "train" : s == Split::val ? "val" : "test";
}

/// Phantom ids are disjoint across splits: split s uses s * 2^32 + i.
inline std::uint64_t phantom_id(Split s, int i) {
  return (static_cast<std::uint64_t>(s) << 32) + static_cast<std::uint64_t>(i);
}

inline Record make_record(std::uint64_t seed, Split split, int i, int size, MaskKind kind, double af) {
  const std::uint64_t id = phantom_id(split, i);
  Record r;
  r.gt = make_phantom(Rng(seed, "dataset").substream(id).next_u64(), size);
  const SamplingMask m = make_mask(kind, size, af, Rng(seed, "masks").substream(id).next_u64());
  r.mask = mask_tensor<double>(m);
  auto u = undersample(r.gt, r.mask);
  r.zero_filled = u.zero_filled;
  r.y = u.y;
  return r;
}

inline std::vector<Record> make_dataset(int count, int size, MaskKind kind, double af, std::uint64_t seed,
                                        Split split = Split::train) {
  if (count < 0) throw ConfigError("make_dataset: negative count");
  std::vector<Record> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(make_record(seed, split, i, size, kind, af));
  return out;
}

struct DatasetInfo {
  std::uint64_t seed = 0;
  int size = 0;
  MaskKind kind = MaskKind::cartesian;
  double af = 4.0;
  int count = 0;
  Split split = Split::train;
};

inline std::string manifest_text(const DatasetInfo& d) {
  std::ostringstream o;
  o << "seed = " << d.seed << "\nsize = " << d.size << "\nkind = " << mask_kind_name(d.kind)
    << "\naf = " << format_double(d.af) << "\ncount = " << d.count << "\nsplit = " << split_name(d.split)
    << "\nformat = FPT1\n";
  return o.str();
}

inline DatasetInfo parse_manifest(const std::string& text) {
  DatasetInfo d;
  for (const auto& e : parse_key_values(text)) {
    if (e.key == "seed") d.seed = parse_number<std::uint64_t>(e);
    else if (e.key == "size") d.size = parse_number<int>(e);
    else if (e.key == "kind") d.kind = parse_mask_kind(e.value);
    else if (e.key == "af") d.af = parse_number<double>(e);
    else if (e.key == "count") d.count = parse_number<int>(e);
    else if (e.key == "split") {
      if (e.value == "train") d.split = Split::train;
      else if (e.value == "val") d.split = Split::val;
      else if (e.value == "test") d.split = Split::test;
      else throw ConfigError("manifest: unknown split '" + e.value + "'");
    } else if (e.key != "format") {
      throw ConfigError("manifest: unknown key '" + e.key + "'");
    }
  }
  if (d.size < 1 || d.count < 0) throw ConfigError("manifest: bad size or count");
  return d;
}

inline std::string record_file(const char* what, int i) { return std::string(what) + "_" + std::to_string(i) + ".fpt1"; }

/// Writes manifest.txt and gt_i / zf_i / y_i / mask_i FPT1 files.
inline void write_split(const std::filesystem::path& dir, const DatasetInfo& info) {
  std::filesystem::create_directories(dir);
  for (int i = 0; i < info.count; ++i) {
    const Record r = make_record(info.seed, info.split, i, info.size, info.kind, info.af);
    save_tensor(dir / record_file("gt", i), r.gt);
    save_tensor(dir / record_file("zf", i), r.zero_filled);
    save_tensor(dir / record_file("y", i), r.y);
    save_tensor(dir / record_file("mask", i), r.mask);
  }
  write_file(dir / "manifest.txt", manifest_text(info));
}

template <class T>
struct LoadedRecord {
  Tensor<T> gt, zero_filled, y, mask;
};

template <class T>
struct LoadedSplit {
  DatasetInfo info;
  std::vector<LoadedRecord<T>> records;
};

template <class T>
LoadedSplit<T> load_split(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.txt")) throw IoError("no manifest.txt in " + dir.string());
  LoadedSplit<T> s;
  s.info = parse_manifest(read_file(dir / "manifest.txt"));
  for (int i = 0; i < s.info.count; ++i) {
    LoadedRecord<T> r{load_tensor<T>(dir / record_file("gt", i)), load_tensor<T>(dir / record_file("zf", i)),
                      load_tensor<T>(dir / record_file("y", i)), load_tensor<T>(dir / record_file("mask", i))};
    const Shape img{1, 2, s.info.size, s.info.size}, msk{1, 1, s.info.size, s.info.size};
    if (r.gt.shape() != img || r.zero_filled.shape() != img || r.y.shape() != img || r.mask.shape() != msk)
      throw IoError("record " + std::to_string(i) + " in " + dir.string() + " has the wrong shape");
    s.records.push_back(std::move(r));
  }
  return s;
}

/// Generates a split in memory, narrowed to T the same way the FPT1 files are.
template <class T>
LoadedSplit<T> generate_split(const DatasetInfo& info) {
  LoadedSplit<T> s{info, {}};
  auto narrow = [](const Tensor<double>& t) {
    std::vector<T> v;
    for (double x : t.values()) v.push_back(static_cast<T>(static_cast<float>(x)));
    return Tensor<T>::from(t.shape(), std::move(v));
  };
  for (int i = 0; i < info.count; ++i) {
    const Record r = make_record(info.seed, info.split, i, info.size, info.kind, info.af);
    s.records.push_back({narrow(r.gt), narrow(r.zero_filled), narrow(r.y), narrow(r.mask)});
  }
  return s;
}

/// Accepts either a split directory (with manifest.txt) or a dataset root
/// holding `preferred` as a subdirectory.
inline std::filesystem::path resolve_split(const std::filesystem::path& dir, Split preferred) {
  if (std::filesystem::exists(dir / "manifest.txt")) return dir;
  const auto sub = dir / split_name(preferred);
  if (std::filesystem::exists(sub / "manifest.txt")) return sub;
  throw IoError("no " + split_name(preferred) + " split or manifest.txt under " + dir.string());
}

}  // namespace fps
