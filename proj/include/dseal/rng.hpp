#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "dseal/tensor.hpp"

namespace dseal {

// Deterministic random source. Every stochastic step in the project draws
// from one of these, seeded explicitly; distributions are implemented here
// rather than with std:: distribution objects so the stream is identical
// across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling keeps the draw unbiased.
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) return 0;
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller (cosine branch).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  void fill_normal(Tensor& t, float mean, float std) {
    for (auto& v : t.data) v = static_cast<float>(mean + std * normal());
  }

  void fill_uniform(Tensor& t, float lo, float hi) {
    for (auto& v : t.data) v = static_cast<float>(uniform(lo, hi));
  }

  // Derive an independent stream; used to give each dataset item / worker
  // its own generator without coupling to iteration order.
  static uint64_t mix(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace dseal
