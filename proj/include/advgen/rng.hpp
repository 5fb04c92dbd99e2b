#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "advgen/matrix.hpp"

namespace advgen {

using Rng = std::mt19937_64;

// Derives an independent stream seed from (base, stream). Distinct stream
// tags give statistically unrelated generators for the same base seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline double standard_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

// Gumbel(0, 1) via -log(-log U) with U strictly inside (0, 1).
inline double gumbel(Rng& rng) {
  double u = uniform01(rng);
  while (u <= 0.0 || u >= 1.0) u = uniform01(rng);
  return -std::log(-std::log(u));
}

inline Matrix normal_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.flat()) v = standard_normal(rng);
  return m;
}

inline Matrix gumbel_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.flat()) v = gumbel(rng);
  return m;
}

// 64-bit FNV-1a, used for vocabulary fingerprints and artifact hashes.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace advgen
