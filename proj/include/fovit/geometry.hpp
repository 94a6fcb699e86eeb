#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <utility>
#include <vector>

namespace fovit {

// The image is a 14x14 grid of blocks; the visual field is 27x27 blocks with
// the fixation at its center block.
inline constexpr int kGridSide = 14;
inline constexpr int kGridBlocks = kGridSide * kGridSide;
inline constexpr int kFieldSide = 27;

// One square pooling region: center offset (dx, dy) in blocks relative to the
// fixation, receptive field rf in {1, 3, 5, 7} (side length in blocks).
struct PoolingRegion {
  int id = 0;
  int dx = 0;
  int dy = 0;
  int rf = 1;
};

// Block coordinate on the 14x14 grid. x = column, y = row.
struct Fixation {
  int x = 0;
  int y = 0;

  friend bool operator==(const Fixation&, const Fixation&) = default;
};

inline bool in_grid(int x, int y) {
  return x >= 0 && x < kGridSide && y >= 0 && y < kGridSide;
}

inline int grid_index(int x, int y) { return y * kGridSide + x; }

// Regions whose center lands inside the image for a given fixation, ordered
// by ascending region id. (bx, by) is the absolute center block.
struct ActiveEntry {
  int region = 0;
  int bx = 0;
  int by = 0;
};

struct ActiveSet {
  std::vector<ActiveEntry> entries;

  int count() const { return static_cast<int>(entries.size()); }
};

// The 49-region layout. Construction validates the full invariant set
// (region counts, fovea offsets, field coverage) and computes the capacity,
// the maximum active-region count over all 196 fixations.
class FoveaLayout {
 public:
  static FoveaLayout canonical();

  const std::vector<PoolingRegion>& regions() const { return regions_; }
  int capacity() const { return capacity_; }
  int visual_field_side() const { return kFieldSide; }
  int image_side() const { return kGridSide; }

 private:
  explicit FoveaLayout(std::vector<PoolingRegion> regions);

  std::vector<PoolingRegion> regions_;
  int capacity_ = 0;
};

ActiveSet active_regions(const FoveaLayout& layout, Fixation f);

// Absolute block coordinate per active region, index-aligned with the pooled
// token order; these are the deposit locations on the 14x14 confidence map.
std::vector<Fixation> centers_for_confidence(const ActiveSet& active);

// Row k of the pooling matrix averages region k's footprint: entry 1/rf^2 at
// every in-grid footprint block, zero elsewhere. Blocks outside the image are
// zero padding; the divisor stays rf^2. pooled = matrix * grid (grid 196xD).
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> pooling_matrix(
    const FoveaLayout& layout, const ActiveSet& active) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> m(active.count(),
                                                          kGridBlocks);
  m.setZero();
  for (int k = 0; k < active.count(); ++k) {
    const ActiveEntry& e = active.entries[static_cast<size_t>(k)];
    const PoolingRegion& r = layout.regions()[static_cast<size_t>(e.region)];
    const int half = (r.rf - 1) / 2;
    const Scalar w = Scalar(1) / Scalar(r.rf * r.rf);
    for (int v = -half; v <= half; ++v) {
      for (int u = -half; u <= half; ++u) {
        const int bx = e.bx + u;
        const int by = e.by + v;
        if (in_grid(bx, by)) m(k, grid_index(bx, by)) = w;
      }
    }
  }
  return m;
}

// pooled = average of the embedded feature vectors in each active region's
// footprint (zero padding outside the image, divisor fixed at rf^2).
// grid is 196xD in block row-major order; the result is count x D.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> pool_features(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& grid,
    const FoveaLayout& layout, Fixation f) {
  if (grid.rows() != kGridBlocks)
    throw std::invalid_argument("pool_features: grid must have 196 rows");
  if (!in_grid(f.x, f.y))
    throw std::invalid_argument("pool_features: fixation out of grid");
  const ActiveSet active = active_regions(layout, f);
  return pooling_matrix<Scalar>(layout, active) * grid;
}

// Valid tokens first, zero rows after; mask true exactly for valid rows.
template <typename Scalar>
std::pair<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>,
          std::vector<bool>>
pad_sequence(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>&
                 pooled,
             int capacity) {
  const int n = static_cast<int>(pooled.rows());
  if (n == 0)
    throw std::logic_error("pad_sequence: empty pooled input");
  if (n > capacity)
    throw std::logic_error("pad_sequence: pooled length exceeds capacity");
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> tokens(capacity,
                                                               pooled.cols());
  tokens.setZero();
  tokens.topRows(n) = pooled;
  std::vector<bool> mask(static_cast<size_t>(capacity), false);
  for (int i = 0; i < n; ++i) mask[static_cast<size_t>(i)] = true;
  return {std::move(tokens), mask};
}

// Text serialization, one region per line: id dx dy rf. Parsed by tests and
// emitted by the layout-dump CLI command.
std::string dump_layout(const FoveaLayout& layout);

}  // namespace fovit
