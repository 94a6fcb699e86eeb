#include "fovit/geometry.hpp"

#include <algorithm>
#include <array>
#include <cstdlib>
#include <sstream>

namespace fovit {
namespace {

// Ring offsets per the canonical arrangement: fovea {-1,0,1}^2 at rf 1, then
// the perimeters of {-3,0,3}^2, {-7,-2,2,7}^2 and {-10,-6,-2,2,6,10}^2 at
// rf 3, 5, 7. Ids run fovea first, rings outward, row-major within a ring.
void append_ring(std::vector<PoolingRegion>& out, const std::vector<int>& axis,
                 int rf, bool perimeter_only) {
  const int lo = *std::min_element(axis.begin(), axis.end());
  const int hi = *std::max_element(axis.begin(), axis.end());
  for (int dy : axis) {
    for (int dx : axis) {
      if (perimeter_only && dx != lo && dx != hi && dy != lo && dy != hi)
        continue;
      if (rf == 3 && dx == 0 && dy == 0) continue;  // fovea owns the center
      out.push_back({static_cast<int>(out.size()), dx, dy, rf});
    }
  }
}

std::vector<PoolingRegion> canonical_regions() {
  std::vector<PoolingRegion> regions;
  regions.reserve(49);
  append_ring(regions, {-1, 0, 1}, 1, false);
  append_ring(regions, {-3, 0, 3}, 3, true);
  append_ring(regions, {-7, -2, 2, 7}, 5, true);
  append_ring(regions, {-10, -6, -2, 2, 6, 10}, 7, true);
  return regions;
}

}  // namespace

FoveaLayout FoveaLayout::canonical() {
  return FoveaLayout(canonical_regions());
}

FoveaLayout::FoveaLayout(std::vector<PoolingRegion> regions)
    : regions_(std::move(regions)) {
  if (regions_.size() != 49)
    throw std::logic_error("FoveaLayout: expected 49 regions");

  std::array<int, 8> rf_count{};
  for (size_t i = 0; i < regions_.size(); ++i) {
    const PoolingRegion& r = regions_[i];
    if (r.id != static_cast<int>(i))
      throw std::logic_error("FoveaLayout: region ids must be 0..48 in order");
    if (r.rf != 1 && r.rf != 3 && r.rf != 5 && r.rf != 7)
      throw std::logic_error("FoveaLayout: rf must be one of {1,3,5,7}");
    rf_count[static_cast<size_t>(r.rf)]++;
    if (r.rf == 1 && (std::abs(r.dx) > 1 || std::abs(r.dy) > 1))
      throw std::logic_error("FoveaLayout: fovea offsets must lie in {-1,0,1}^2");
  }
  if (rf_count[1] != 9)
    throw std::logic_error("FoveaLayout: expected 9 fovea regions");

  // Every block of the 27x27 field must fall inside at least one footprint.
  const int c = kFieldSide / 2;
  for (int fy = 0; fy < kFieldSide; ++fy) {
    for (int fx = 0; fx < kFieldSide; ++fx) {
      bool covered = false;
      for (const PoolingRegion& r : regions_) {
        const int half = (r.rf - 1) / 2;
        if (std::abs(fx - c - r.dx) <= half && std::abs(fy - c - r.dy) <= half) {
          covered = true;
          break;
        }
      }
      if (!covered)
        throw std::logic_error("FoveaLayout: visual field not fully covered");
    }
  }

  // Brute-force capacity over all 196 fixations.
  capacity_ = 0;
  for (int y = 0; y < kGridSide; ++y) {
    for (int x = 0; x < kGridSide; ++x) {
      int n = 0;
      for (const PoolingRegion& r : regions_)
        if (in_grid(x + r.dx, y + r.dy)) ++n;
      capacity_ = std::max(capacity_, n);
    }
  }
}

ActiveSet active_regions(const FoveaLayout& layout, Fixation f) {
  if (!in_grid(f.x, f.y))
    throw std::invalid_argument("active_regions: fixation out of grid");
  ActiveSet active;
  active.entries.reserve(static_cast<size_t>(layout.capacity()));
  for (const PoolingRegion& r : layout.regions()) {
    const int bx = f.x + r.dx;
    const int by = f.y + r.dy;
    if (in_grid(bx, by)) active.entries.push_back({r.id, bx, by});
  }
  return active;
}

std::vector<Fixation> centers_for_confidence(const ActiveSet& active) {
  std::vector<Fixation> centers;
  centers.reserve(active.entries.size());
  for (const ActiveEntry& e : active.entries) centers.push_back({e.bx, e.by});
  return centers;
}

std::string dump_layout(const FoveaLayout& layout) {
  std::ostringstream os;
  os << "# fovea layout: id dx dy rf\n";
  os << "# visual_field_side " << layout.visual_field_side() << "\n";
  os << "# image_side " << layout.image_side() << "\n";
  os << "# capacity " << layout.capacity()
     << " (reference implementation value: 29)\n";
  for (const PoolingRegion& r : layout.regions())
    os << r.id << " " << r.dx << " " << r.dy << " " << r.rf << "\n";
  return os.str();
}

}  // namespace fovit
