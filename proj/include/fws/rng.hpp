// Deterministic randomness. std::mt19937_64 gives a portable bit stream, but
// the standard distributions are implementation-defined, so the distribution
// layer (uniform, normal, shuffle) is hand-rolled here to keep outputs
// bit-identical everywhere.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "fws/common.hpp"

namespace fws {

// splitmix64: mixes a seed with stream tags so sub-seeds are independent.
inline u64 mix_seed(u64 a, u64 b) {
  u64 z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline u64 mix_seed(u64 a, u64 b, u64 c) { return mix_seed(mix_seed(a, b), c); }

class Rng {
 public:
  explicit Rng(u64 seed) : engine_(seed) {}

  u64 next_u64() { return engine_(); }

  // Uniform in [0, n) by rejection; unbiased.
  u64 next_below(u64 n) {
    check(n > 0, "Rng::next_below: n must be positive");
    const u64 limit = ~u64{0} - (~u64{0} % n);
    u64 x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Uniform double in [0, 1).
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Box-Muller; one value per call, the pair partner is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = next_double();
    } while (u1 <= 0.0);
    u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (u64 i = v.size(); i > 1; --i) {
      u64 j = next_below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::vector<i64> permutation(i64 n) {
    std::vector<i64> p(static_cast<size_t>(n));
    for (i64 i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    shuffle(p);
    return p;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fws
