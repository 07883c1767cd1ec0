#pragma once

// Seeded generators for synthetic adapters. Gaussian draws use Box-Muller over
// raw mt19937_64 output so the stream is identical across standard libraries.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "nullfuse/linalg.hpp"

namespace nullfuse {

class GaussianStream {
 public:
  explicit GaussianStream(std::uint64_t seed) : engine_(seed) {}

  double uniform() {
    // 53 random bits into (0, 1].
    return (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
  }

  double next() {
    if (cached_) {
      cached_ = false;
      return spare_;
    }
    const double radius = std::sqrt(-2.0 * std::log(uniform()));
    const double angle = 2.0 * std::numbers::pi * uniform();
    spare_ = radius * std::sin(angle);
    cached_ = true;
    return radius * std::cos(angle);
  }

  std::uint64_t bits() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool cached_ = false;
};

inline Matrix random_matrix(std::size_t rows, std::size_t cols, GaussianStream& rng,
                            double stddev = 1.0) {
  std::vector<double> entries(rows * cols);
  for (auto& e : entries) e = stddev * rng.next();
  return Matrix(rows, cols, std::move(entries));
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  GaussianStream rng(seed);
  return random_matrix(rows, cols, rng);
}

/// Gaussian LoRA pair with the usual magnitudes: up ~ N(0, 1/r), down ~ N(0, 1/n).
inline LowRankUpdate random_update(std::size_t m, std::size_t n, std::size_t rank,
                                   std::uint64_t seed, double scale = 1.0) {
  GaussianStream rng(seed);
  Matrix up = random_matrix(m, rank, rng, 1.0 / std::sqrt(static_cast<double>(rank)));
  Matrix down = random_matrix(rank, n, rng, 1.0 / std::sqrt(static_cast<double>(n)));
  return LowRankUpdate(std::move(up), std::move(down), scale);
}

/// Random n x k matrix with orthonormal columns.
inline Matrix random_orthonormal(std::size_t n, std::size_t k, std::uint64_t seed) {
  return thin_qr(random_matrix(n, k, seed)).q;
}

}  // namespace nullfuse
