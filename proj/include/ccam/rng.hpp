#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ccam {

/// SplitMix64 used as a counter-based generator: the n-th output is a fixed
/// bijective mix of `seed + n * golden_gamma`, so a stream is fully described
/// by (seed, counter) and gives identical values on every platform.
class Rng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() { return mix(seed_ + (++counter_) * kGamma); }

  /// Independent stream keyed by `stream`; does not advance this generator.
  Rng fork(std::uint64_t stream) const { return Rng(mix(seed_ ^ mix(stream + kGamma))); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) by rejection (no modulo bias).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller; consumes two uniforms per call.
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

/// Fisher-Yates shuffle driven by Rng.
template <class Vec>
void shuffle(Vec& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace ccam
