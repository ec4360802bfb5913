#pragma once

#include <cmath>
#include <cstdint>

namespace latx {

// xoshiro256++ with a splitmix64 seeder. All randomness in the kit flows
// through this generator so results do not depend on the C++ standard
// library implementation.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& si : s_) si = splitmix64(x);
    has_gauss_ = false;
  }

  uint64_t next_u64() {
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

  // uniform in [0,1)
  double next_double() { return (next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  int uniform_int(int lo, int hi) {  // inclusive range
    return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
  }

  bool bernoulli(double p) { return next_double() < p; }

  // Box-Muller, caching the second draw.
  double gauss(double mean = 0.0, double stddev = 1.0) {
    if (has_gauss_) {
      has_gauss_ = false;
      return mean + stddev * gauss_cache_;
    }
    double u1 = 0.0;
    do {
      u1 = next_double();
    } while (u1 <= 1e-300);
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    gauss_cache_ = r * std::sin(a);
    has_gauss_ = true;
    return mean + stddev * r * std::cos(a);
  }

  // Derives an independent stream, e.g. per sample or per epoch.
  static uint64_t derive(uint64_t seed, uint64_t tag) {
    uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL + tag * 0xbf58476d1ce4e5b9ULL);
    return splitmix64(x);
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  uint64_t s_[4];
  double gauss_cache_ = 0.0;
  bool has_gauss_ = false;
};

}  // namespace latx
