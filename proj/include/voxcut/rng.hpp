#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace voxcut {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Seeded random stream. The engine is std::mt19937_64 (its output sequence is
// pinned by the standard); all distributions are implemented here so that a
// given seed produces the same draws on every platform and toolchain.
//
// Streams for parallel workers are derived with `derive(seed, {ids...})`:
// distinct id paths give statistically independent streams, and results never
// depend on which thread consumed which stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t s = seed;
    const std::uint64_t a = splitmix64(s);
    engine_.seed(a);
  }

  static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = seed;
    splitmix64(s);
    for (std::uint64_t id : path) {
      s ^= id + 0x9e3779b97f4a7c15ull + (s << 6) + (s >> 2);
      splitmix64(s);
    }
    return Rng(s);
  }

  std::uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // uniform integer in [lo, hi], inclusive; unbiased via rejection
  int uniform_int(int lo, int hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t reject_above = UINT64_MAX - UINT64_MAX % range;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= reject_above);
    return lo + static_cast<int>(v % range);
  }

  // standard normal via Box-Muller; the pair is cached, so draw order within a
  // stream is part of its identity
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * uniform();
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace voxcut
