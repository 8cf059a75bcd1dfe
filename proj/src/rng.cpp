#include "skipat/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <type_traits>

namespace skipat {
namespace {

constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) {
  for (auto& word : s_) word = splitmix64(seed);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("Rng::below: zero bound");
  // Rejection keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % bound;
}

std::array<double, 2> Rng::normal_pair() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  return {radius * std::cos(angle), radius * std::sin(angle)};
}

template <typename T>
Tensor<T> rand_normal(Rng& rng, const Dims& dims, double mean, double std) {
  if (!(std >= 0)) throw std::invalid_argument("rand_normal: std must be nonnegative");
  Tensor<T> out(dims);
  for (std::size_t i = 0; i < out.size(); i += 2) {
    const auto pair = rng.normal_pair();
    out[i] = static_cast<T>(mean + std * pair[0]);
    if (i + 1 < out.size()) out[i + 1] = static_cast<T>(mean + std * pair[1]);
  }
  return out;
}

template <typename T>
Tensor<T> rand_trunc_normal(Rng& rng, const Dims& dims, double mean, double std, double lo,
                            double hi) {
  if (!(std >= 0)) throw std::invalid_argument("rand_trunc_normal: std must be nonnegative");
  if (!(lo < hi)) throw std::invalid_argument("rand_trunc_normal: lo must be below hi");
  if (std == 0 && (mean < lo || mean > hi)) {
    throw std::invalid_argument("rand_trunc_normal: degenerate distribution outside bounds");
  }
  Tensor<T> out(dims);
  std::size_t filled = 0;
  std::size_t rejected = 0;
  while (filled < out.size()) {
    for (double z : rng.normal_pair()) {
      const double v = mean + std * z;
      if (v < lo || v > hi) {
        if (++rejected > 100'000'000) {
          throw std::runtime_error("rand_trunc_normal: acceptance region too small");
        }
        continue;
      }
      if (filled < out.size()) out[filled++] = static_cast<T>(v);
    }
  }
  return out;
}

template <typename T>
Tensor<T> rand_uniform(Rng& rng, const Dims& dims) {
  Tensor<T> out(dims);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if constexpr (std::is_same_v<T, float>) {
      out[i] = static_cast<float>(rng.next_u64() >> 40) * 0x1.0p-24f;  // stays below 1
    } else {
      out[i] = rng.uniform();
    }
  }
  return out;
}

template Tensor<float> rand_normal(Rng&, const Dims&, double, double);
template Tensor<double> rand_normal(Rng&, const Dims&, double, double);
template Tensor<float> rand_trunc_normal(Rng&, const Dims&, double, double, double, double);
template Tensor<double> rand_trunc_normal(Rng&, const Dims&, double, double, double, double);
template Tensor<float> rand_uniform(Rng&, const Dims&);
template Tensor<double> rand_uniform(Rng&, const Dims&);

}  // namespace skipat
