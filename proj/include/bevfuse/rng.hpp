#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace bevfuse {

// Deterministic RNG. mt19937_64 has a standard-specified output sequence;
// the distributions are hand-rolled because the std ones are
// implementation-defined and would break bitwise scene reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next() { return gen_(); }

  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // Box-Muller; draws two uniforms per call.
    double a = uniform(), b = uniform();
    if (a <= 0.0) a = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(a)) * std::cos(2.0 * M_PI * b);
  }

  // Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n) { return n ? gen_() % n : 0; }

  int randint(int lo, int hi) { return lo + static_cast<int>(index(static_cast<std::uint64_t>(hi - lo))); }

 private:
  std::mt19937_64 gen_;
};

}  // namespace bevfuse
