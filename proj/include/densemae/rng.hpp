#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace densemae {

// splitmix64 finalizer; used to derive independent per-sample / per-epoch seeds.
std::uint64_t mix_seed(std::uint64_t x);

// seed_i = hash(base, i, ...). Order of components matters.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path);

// Random source with platform-independent distributions (std distributions are
// implementation-defined, which would break cross-toolchain reproducibility).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix_seed(seed)) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace densemae
