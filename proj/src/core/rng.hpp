#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace ts {

// Counter-based generator: draw i is a pure function of (seed, i), so streams
// can be split per parameter / per sample without shared state and replay
// identically on any platform.
class Rng {
 public:
  Rng() = default;
  explicit Rng(uint64_t seed, uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  // Derive an independent stream, e.g. one per parameter name or sample index.
  static Rng derive(uint64_t seed, const std::string& tag) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : tag) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return Rng(mix_(seed ^ h));
  }
  static Rng derive(uint64_t seed, uint64_t tag) { return Rng(mix_(seed ^ mix_(tag + 0x9e3779b97f4a7c15ULL))); }

  uint64_t next_u64() {
    const uint64_t x = mix_(seed_ + (++counter_) * 0x9e3779b97f4a7c15ULL);
    return x;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0. Rejection-free modulo is fine here:
  // n is tiny relative to 2^64, bias is < 1e-15.
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller, cosine branch only so each draw consumes exactly two uniforms.
  double normal(double mean = 0.0, double stddev = 1.0) {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586 * u2);
  }

  uint64_t seed() const { return seed_; }
  uint64_t counter() const { return counter_; }
  void set_state(uint64_t seed, uint64_t counter) {
    seed_ = seed;
    counter_ = counter;
  }

 private:
  // splitmix64 finalizer.
  static uint64_t mix_(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t seed_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace ts
