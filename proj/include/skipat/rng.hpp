#pragma once

#include <array>
#include <cstdint>

#include "skipat/tensor.hpp"

namespace skipat {

/// xoshiro256** seeded by splitmix64 expansion of a 64-bit seed. The stream
/// is a pure function of the seed on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);
  /// Standard normal pair via Box–Muller; consumes exactly two draws.
  std::array<double, 2> normal_pair();

  const std::array<std::uint64_t, 4>& state() const noexcept { return s_; }

 private:
  std::array<std::uint64_t, 4> s_{};
};

std::uint64_t splitmix64(std::uint64_t& x);

template <typename T>
Tensor<T> rand_normal(Rng& rng, const Dims& dims, double mean, double std);

/// Normal(mean, std) restricted to [lo, hi] by rejection.
template <typename T>
Tensor<T> rand_trunc_normal(Rng& rng, const Dims& dims, double mean, double std, double lo,
                            double hi);

template <typename T>
Tensor<T> rand_uniform(Rng& rng, const Dims& dims);

}  // namespace skipat
