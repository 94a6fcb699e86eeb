#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace fovit {

// Every randomized stage draws from its own stream keyed by (seed, context,
// index), so results never depend on processing order, batch size, or worker
// count. Evaluation-time streams use kEvalContext; training streams use the
// epoch number, giving each image a fresh initial fixation every epoch.
inline constexpr uint32_t kEvalContext = 0xffffffffu;

inline std::mt19937 stream_rng(uint64_t seed, uint32_t context,
                               uint64_t index) {
  std::seed_seq sq{uint32_t(seed),  uint32_t(seed >> 32), context,
                   uint32_t(index), uint32_t(index >> 32)};
  return std::mt19937(sq);
}

// Multiply-shift mapping to [0, n): one draw, bias below n / 2^32.
inline uint32_t uniform_below(std::mt19937& g, uint32_t n) {
  return uint32_t((uint64_t(g()) * n) >> 32);
}

// Box-Muller, exactly two draws per value.
inline double gauss(std::mt19937& g) {
  const double u1 = (double(g()) + 0.5) * 0x1p-32;
  const double u2 = (double(g()) + 0.5) * 0x1p-32;
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * 3.14159265358979323846 * u2);
}

}  // namespace fovit
