#pragma once

#include <cstdint>
#include <random>

#include "tslab/tensor.hpp"

namespace tslab {

/// Seeded random stream with a pinned normal sampler.
///
/// mt19937_64 output is fixed by the standard, but normal_distribution's
/// algorithm is not, so Gaussian draws go through an explicit Box-Muller
/// transform to keep results bit-identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // uniform in [0, 1)
  double uniform() {
    return std::ldexp(static_cast<double>(engine_() >> 11), -53);
  }

  // uniform integer in [lo, hi] via rejection-free Lemire-style reduction
  int uniform_int(int lo, int hi);

  double normal();
  Tensor normal_tensor(std::vector<int> shape, double stddev);

  std::uint64_t raw() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Stable seed derivation for independent streams (trial seeds, probe
/// batches, ...) from a base seed and a small label.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0);

}  // namespace tslab
