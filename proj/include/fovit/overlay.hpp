#pragma once

#include <string>

#include "fovit/geometry.hpp"
#include "fovit/image.hpp"
#include "fovit/trace.hpp"

namespace fovit {

// One SVG for a traced episode: the image with the fixation sequence drawn
// over it (circles growing with fixation order, transition arrows, a class
// and probability label per fixation), followed by one panel per fixation
// painting each pooling region's mean color across its footprint — what the
// pooled sequence actually carries. Block coordinates map to pixel centers
// at x * patch_side + patch_side / 2.
std::string render_trace_overlay(const ImageU8& img, const TraceDoc& doc,
                                 const FoveaLayout& layout, int patch_side);

}  // namespace fovit
