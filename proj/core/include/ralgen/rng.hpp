#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace ralgen {

// Deterministic xoshiro256++ generator with hand-rolled distribution
// transforms. std:: distributions are implementation-defined, which would
// break the bit-identical reproducibility contract, so everything numeric
// is derived here from raw 64-bit draws.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    // SplitMix64 expansion of the seed into the 256-bit state.
    uint64_t x = seed;
    for (auto& si : s_) si = splitmix(x);
  }

  uint64_t u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform01(); }

  // Standard normal via Box-Muller (no cached spare; two draws per call).
  double normal() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n) by rejection, bias-free.
  uint64_t bounded(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t threshold = (0 - n) % n;
    for (;;) {
      const uint64_t r = u64();
      if (r >= threshold) return r % n;
    }
  }

  int randint(int n) { return static_cast<int>(bounded(static_cast<uint64_t>(n))); }

  bool bernoulli(double p) { return uniform01() < p; }

  // Categorical draw over unnormalized nonnegative weights.
  int categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    const double u = uniform01() * total;
    double acc = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
  }

  // Deterministic child stream; children with distinct indices are
  // de-correlated from each other and the parent.
  Rng split(uint64_t index) const {
    uint64_t x = s_[0] ^ rotl(s_[2], 29);
    x ^= 0x9e3779b97f4a7c15ull * (index + 1);
    uint64_t y = splitmix(x);
    return Rng(y ^ rotl(s_[1] + s_[3], 13));
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static uint64_t splitmix(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t s_[4];
};

}  // namespace ralgen
