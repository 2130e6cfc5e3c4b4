// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace ux2 {

/// splitmix64 mixing step. Keyed derivation below builds every random
/// stream in the project from an explicit seed, so any draw can be
/// reproduced from (seed, purpose, indices) without carrying generator
/// state around.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t a) { return mix64(seed ^ mix64(a)); }
inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b) {
  return derive_seed(derive_seed(seed, a), b);
}
inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
  return derive_seed(derive_seed(seed, a, b), c);
}

/// Stream tags for derive_seed; keeps independent uses of one run seed apart.
namespace stream {
constexpr uint64_t kCorpus = 0x636f7270;      // corpus example draws
constexpr uint64_t kPermutation = 0x7065726d;  // language permutation
constexpr uint64_t kTaskSample = 0x7461736b;   // task scheduler
constexpr uint64_t kBatch = 0x62617463;        // batch index draws
constexpr uint64_t kMask = 0x6d61736b;         // MLM / mMMT masking
constexpr uint64_t kPrefix = 0x70726678;       // prefix split
constexpr uint64_t kItm = 0x69746d00;          // ITM negatives
constexpr uint64_t kInit = 0x696e6974;         // parameter init
constexpr uint64_t kSide = 0x73696465;         // text-pair side / direction
constexpr uint64_t kNoise = 0x6e6f6973;        // image pixel noise
constexpr uint64_t kHead = 0x68656164;         // classifier head training
}  // namespace stream

/// Small deterministic PRNG (splitmix64 sequence).
class Rng {
public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be > 0.
  uint64_t below(uint64_t n) { return next_u64() % n; }

  /// Uniform integer in [lo, hi] inclusive.
  int64_t range(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo + 1)));
  }

  bool coin() { return (next_u64() & 1ull) != 0; }

  /// Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  /// Normal truncated to [-2σ, 2σ], the usual transformer init.
  double truncated_normal(double sigma) {
    double v = normal();
    while (v < -2.0 || v > 2.0) v = normal();
    return v * sigma;
  }

private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ux2
