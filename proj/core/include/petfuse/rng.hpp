// Deterministic random number generation.
//
// Every stochastic component of the pipeline draws from this generator so that
// a run is fully reproducible from a single master seed, independent of the
// standard library implementation and of how work is scheduled across threads.
// Streams for sub-tasks are derived with Rng::derive before dispatch.
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace petfuse {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // Warm up so that small seeds do not produce correlated first draws.
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  // Standard normal via Marsaglia polar method; one spare is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double mul = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * mul;
    has_spare_ = true;
    return u * mul;
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  double lognormal(double mu, double sigma) { return std::exp(normal(mu, sigma)); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = next_u64() % i;
      std::swap(v[i - 1], v[j]);
    }
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    shuffle(p);
    return p;
  }

  // Derive an independent child seed from (seed, salt).
  static uint64_t derive(uint64_t seed, uint64_t salt) {
    uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL + (salt << 1));
    splitmix64(s);
    return splitmix64(s);
  }

  // Derive from a string tag (FNV-1a folded into the seed).
  static uint64_t derive(uint64_t seed, std::string_view tag) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : tag) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return derive(seed, h);
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace petfuse
