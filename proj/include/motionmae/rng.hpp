#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace mmae {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent sub-seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic seed for a (base, tag, index...) tuple.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = mix64(base);
  for (auto p : parts) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Uniform integer in [lo, hi], both inclusive.
inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  std::uniform_int_distribution<std::int64_t> dist(lo, hi);
  return dist(rng);
}

// Normal draw resampled until it lies within two standard deviations.
inline double truncated_normal(Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (;;) {
    const double z = dist(rng);
    if (z >= -2.0 && z <= 2.0) return z * stddev;
  }
}

}  // namespace mmae
