#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace eqnet {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seeded RNG with hand-rolled distributions. std:: distributions are
/// implementation-defined; these streams are identical on every platform
/// for a given seed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Unbiased integer in [0, bound), bound >= 1.
  uint64_t below(uint64_t bound) {
    const uint64_t limit = bound * (UINT64_MAX / bound);
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % bound;
  }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = uniform();
    } while (u <= 0.0);
    v = uniform();
    const double r = std::sqrt(-2.0 * std::log(u));
    s = 6.283185307179586476925286766559 * v;
    spare_ = r * std::sin(s);
    have_spare_ = true;
    return r * std::cos(s);
  }

  bool coin() { return (next_u64() >> 63) != 0; }

  /// Derive an independent child stream.
  Rng fork() { return Rng(splitmix64(next_u64())); }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace eqnet
