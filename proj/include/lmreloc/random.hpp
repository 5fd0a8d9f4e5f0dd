// Seeded random helpers. Distributions are implemented here rather than with
// <random>'s distribution classes, whose output is implementation-defined;
// datasets must rebuild bit-identically from recorded seeds.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace lmreloc {

using Rng = std::mt19937_64;

// Uniform in [0, 1).
[[nodiscard]] inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

[[nodiscard]] inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Uniform integer in [0, n).
[[nodiscard]] inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  return static_cast<std::uint64_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

// Standard normal via Box-Muller.
[[nodiscard]] inline double standard_normal(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);  // (0, 1]
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// SplitMix64 finalizer; derives independent child seeds from (seed, index).
[[nodiscard]] inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace lmreloc
