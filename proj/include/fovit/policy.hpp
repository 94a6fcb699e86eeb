#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "fovit/geometry.hpp"
#include "fovit/tape.hpp"

namespace fovit {

// Where-to-look-next state. `evidence` accumulates readout attention mass at
// region centers across fixations; `inhibition` suppresses revisits and
// fades geometrically as new fixations are registered. Both live on the
// 14x14 block grid, indexed (row = y, col = x).
template <typename S>
struct ConfidenceState {
  Mat<S> evidence = Mat<S>::Zero(kGridSide, kGridSide);
  Mat<S> inhibition = Mat<S>::Zero(kGridSide, kGridSide);
  std::vector<Fixation> history;
  int updates = 0;
};

// Deposits one fixation's readout weights at the active regions' center
// blocks. `feature_weights` is indexed like the pooled token sequence
// (defensively padded to capacity); padding slots must carry exactly zero.
template <typename S>
void update_evidence(ConfidenceState<S>& state, const FoveaLayout& layout,
                     Fixation fix, const Mat<S>& feature_weights) {
  if (feature_weights.rows() != 1 ||
      feature_weights.cols() != layout.capacity())
    throw std::invalid_argument(
        "update_evidence: weights must be 1 x capacity");
  const ActiveSet active = active_regions(layout, fix);
  const std::vector<Fixation> centers = centers_for_confidence(active);
  for (Eigen::Index j = Eigen::Index(centers.size());
       j < feature_weights.cols(); ++j)
    if (feature_weights(0, j) != S(0))
      throw std::invalid_argument(
          "update_evidence: nonzero weight in a padding slot");
  for (size_t i = 0; i < centers.size(); ++i)
    state.evidence(centers[i].y, centers[i].x) +=
        feature_weights(0, Eigen::Index(i));
  ++state.updates;
}

// Marks a fixation as taken: all existing inhibition fades by `decay`, then
// a full-strength 3x3 stamp (clipped at the grid edge) is combined in by
// maximum, so revisiting a block is discouraged most right after leaving it.
template <typename S>
void register_fixation(ConfidenceState<S>& state, Fixation fix,
                       S amplitude = S(1), S decay = S(0.5)) {
  if (!in_grid(fix.x, fix.y))
    throw std::invalid_argument("register_fixation: fixation off grid");
  state.inhibition *= decay;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      const int x = fix.x + dx;
      const int y = fix.y + dy;
      if (!in_grid(x, y)) continue;
      if (state.inhibition(y, x) < amplitude) state.inhibition(y, x) = amplitude;
    }
  }
  state.history.push_back(fix);
}

// Argmax of evidence minus inhibition; earlier blocks in row-major order win
// ties. Meaningless before any evidence has been deposited, so that is an
// error.
template <typename S>
Fixation next_fixation(const ConfidenceState<S>& state) {
  if (state.updates == 0)
    throw std::logic_error("next_fixation: no evidence deposited yet");
  Fixation best{0, 0};
  S best_score = std::numeric_limits<S>::lowest();
  for (int y = 0; y < kGridSide; ++y) {
    for (int x = 0; x < kGridSide; ++x) {
      const S score = state.evidence(y, x) - state.inhibition(y, x);
      if (score > best_score) {
        best_score = score;
        best = {x, y};
      }
    }
  }
  return best;
}

// Uniform block via two multiply-shift draws (one per axis), so the
// generator always advances by exactly two states per call. The mapping's
// bias is below 2^-27 per axis.
inline Fixation random_fixation(std::mt19937& rng) {
  const uint32_t a = rng();
  const uint32_t b = rng();
  const int x = int((uint64_t(a) * kGridSide) >> 32);
  const int y = int((uint64_t(b) * kGridSide) >> 32);
  return {x, y};
}

}  // namespace fovit
