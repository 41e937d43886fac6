#pragma once

#include <cstdint>
#include <random>

namespace eapgp {

// Deterministic random source. The engine is std::mt19937_64 (its output
// sequence is fixed by the standard); uniform/normal draws are implemented
// here by hand because the std distributions are implementation-defined and
// would break cross-toolchain reproducibility of seeds, checkpoints, and
// golden files.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();

  // Uniform integer in [0, n). n must be > 0.
  int64_t uniform_int(int64_t n);

  // Standard normal via Box-Muller (cached spare).
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace eapgp
