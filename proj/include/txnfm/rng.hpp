#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "txnfm/common.hpp"

namespace txnfm::rng {

// SplitMix64 finalizer; the basis of all randomness in the project.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// A named substream of the master seed. Streams are keyed by
// (seed, purpose string, index), so e.g. adding users to a generated dataset
// never perturbs the draws of existing users, and adding a parameter tensor
// to a model never shifts the init of the others.
class Stream {
 public:
  Stream(uint64_t seed, std::string_view purpose, uint64_t index = 0) {
    state_ = mix64(seed ^ mix64(fnv1a64(purpose)) ^ mix64(index * 0x9e3779b97f4a7c15ull + 1));
    gauss_cached_ = false;
  }

  uint64_t next_u64() { return mix64(state_ += 0x9e3779b97f4a7c15ull); }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

  // Box-Muller with a cached spare.
  double normal() {
    if (gauss_cached_) {
      gauss_cached_ = false;
      return gauss_spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    gauss_spare_ = r * std::sin(theta);
    gauss_cached_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Inversion by sequential search; fine for the small rates used here.
  int poisson(double lambda) {
    if (lambda <= 0.0) return 0;
    double l = std::exp(-lambda), p = 1.0;
    int k = 0;
    do {
      ++k;
      p *= uniform();
    } while (p > l && k < 10000);
    return k - 1;
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  uint64_t state_;
  bool gauss_cached_;
  double gauss_spare_ = 0.0;
};

}  // namespace txnfm::rng
