#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace mimo {

// Seeded random source. The engine is std::mt19937_64; the conversions to
// doubles, integers and distributions are done here so the produced streams
// do not depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t below(std::size_t n);  // uniform in [0, n)
  bool bernoulli(double p) { return uniform() < p; }
  double normal();
  double laplace(double location, double scale);
  std::vector<std::size_t> permutation(std::size_t n);

  // Child stream derived from this generator's seed material and `stream`.
  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
};

}  // namespace mimo
