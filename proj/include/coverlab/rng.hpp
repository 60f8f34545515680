#pragma once

// Seeded random streams. Every replicate and every pipeline stage owns its
// own generator; seeds are derived by counter from the base seed so that any
// replicate can be reproduced in isolation.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace coverlab {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Seed of stream `counter` under `base`: splitmix64(base ^ splitmix64(counter)).
inline constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t counter) noexcept {
  return splitmix64(base ^ splitmix64(counter));
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t s = base;
  for (auto c : path) s = derive_seed(s, c);
  return s;
}

// Stage tags used with derive_seed.
enum class Stream : std::uint64_t {
  population = 1,
  census = 2,
  sampling = 3,
  pes = 4,
  matching = 5,
  follow_up = 6,
};

inline std::uint64_t replicate_seed(std::uint64_t base, std::uint64_t replicate) noexcept {
  return derive_seed(base, replicate);
}

inline std::uint64_t stage_seed(std::uint64_t replicate_seed, Stream s) noexcept {
  return derive_seed(replicate_seed, static_cast<std::uint64_t>(s));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform on [0, 1) with 53 bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
    return d(engine_);
  }

  /// Uniform integer in [lo, hi].
  std::int64_t between(std::int64_t lo, std::int64_t hi) {
    std::uniform_int_distribution<std::int64_t> d(lo, hi);
    return d(engine_);
  }

  double normal() {
    std::normal_distribution<double> d(0.0, 1.0);
    return d(engine_);
  }

  std::int64_t poisson(double mean) {
    if (mean <= 0.0) return 0;
    std::poisson_distribution<std::int64_t> d(mean);
    return d(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

inline double logit(double p) { return std::log(p / (1.0 - p)); }
inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace coverlab
