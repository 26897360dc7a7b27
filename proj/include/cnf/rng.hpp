#ifndef CNF_RNG_HPP
#define CNF_RNG_HPP

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace cnf {

// splitmix64: the whole project derives randomness from it so that results
// are reproducible bit-for-bit across platforms (std:: distributions are
// implementation-defined and cannot be used for that).
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic seed derivation for independent streams: fold the parts into
// the base seed one splitmix round at a time.
inline uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> parts) {
  uint64_t s = splitmix64(base);
  for (uint64_t p : parts) s = splitmix64(s ^ (p + 0x9e3779b97f4a7c15ULL));
  return s;
}

class Rng {
public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0xd1b54a32d192ed03ULL)) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], both inclusive.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Exponential with the given mean.
  double exponential(double mean) {
    double u = uniform();
    if (u > 1.0 - 1e-16) u = 1.0 - 1e-16;
    return -mean * std::log1p(-u);
  }

private:
  uint64_t state_;
};

}  // namespace cnf

#endif
