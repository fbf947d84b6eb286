#pragma once

// Splittable counter-based RNG. Core generator is SplitMix64
// (Steele et al. 2014): state advances by the golden-ratio constant,
// output is a finalizer of the new state. Bit-identical across
// platforms; streams are split by hashing a label into a fresh seed.

#include <cmath>
#include <cstdint>
#include <string_view>

namespace cmavit {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  // Box-Muller; consumes exactly two draws per call, no caching, so the
  // stream position is predictable.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Rejection-sampled truncation at +/-2 sigma.
  double truncated_normal(double stddev) {
    for (;;) {
      const double z = normal();
      if (z > -2.0 && z < 2.0) return z * stddev;
    }
  }

  // Derive an independent stream from a label (FNV-1a over the label,
  // mixed with the parent's next draw).
  Rng split(std::string_view label) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : label) {
      h ^= static_cast<std::uint8_t>(c);
      h *= 0x100000001b3ULL;
    }
    return Rng(h ^ next_u64());
  }

  Rng split(std::uint64_t index) {
    return Rng((index * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL) ^ next_u64());
  }

 private:
  std::uint64_t state_;
};

}  // namespace cmavit
