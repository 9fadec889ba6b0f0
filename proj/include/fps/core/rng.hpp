#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace fps {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Counter-based generator: the i-th draw is a pure function of
/// (seed, stream, i), so results do not depend on platform or library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::string_view stream = {}) noexcept
      : seed_(seed), key_(detail::splitmix64(seed ^ detail::splitmix64(detail::fnv1a(stream)))) {}

  /// Independent named child stream.
  [[nodiscard]] Rng substream(std::string_view name) const noexcept {
    Rng r(seed_);
    r.key_ = detail::splitmix64(key_ ^ detail::fnv1a(name));
    return r;
  }

  [[nodiscard]] Rng substream(std::uint64_t index) const noexcept {
    Rng r(seed_);
    r.key_ = detail::splitmix64(key_ + 0x632be59bd9b4e019ULL * (index + 1));
    return r;
  }

  std::uint64_t next_u64() noexcept {
    return detail::splitmix64(key_ ^ detail::splitmix64(counter_++));
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (one value per two draws).
  double normal() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
  [[nodiscard]] std::uint64_t position() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace fps
