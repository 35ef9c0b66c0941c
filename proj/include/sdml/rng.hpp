#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace sdml {

// Splittable counter-based PRNG (splitmix64 core). One seeded root stream
// is split per module / per sample so generation order never depends on
// scheduling. Same seed => same values, everywhere, at any thread count.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(scramble(seed ^ 0x9e3779b97f4a7c15ull)), state_(seed_) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return scramble(state_);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n >= 1.
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

  // Standard normal via Box-Muller (pair cached).
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stdev) { return mean + stdev * normal(); }

  // Child stream independent of this stream's consumption position.
  Rng split(std::string_view label) const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : label) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h *= 0x100000001b3ull;
    }
    return Rng(scramble(seed_ ^ h));
  }

  Rng split(std::uint64_t index) const {
    return Rng(scramble(seed_ + 0x9e3779b97f4a7c15ull * (index + 1)));
  }

 private:
  static std::uint64_t scramble(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t state_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace sdml
