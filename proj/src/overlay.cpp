#include "fovit/overlay.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace fovit {

namespace {

constexpr int kGap = 10;
constexpr int kBand = 18;  // caption band above each panel

int block_center_px(int block, int patch_side) {
  return block * patch_side + patch_side / 2;
}

std::string fmt(const char* pattern, double a, double b = 0, double c = 0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, pattern, a, b, c);
  return buf;
}

// mean color the pooled token carries: the region's pixel sum over its full
// rf^2-block footprint, off-canvas parts counting as black
struct MeanColor {
  int r = 0, g = 0, b = 0;
};

MeanColor region_mean(const ImageU8& img, int bx, int by, int rf,
                      int patch_side) {
  const int half = rf / 2;
  const int x0 = (bx - half) * patch_side;
  const int y0 = (by - half) * patch_side;
  const int side = rf * patch_side;
  long long sum[3] = {0, 0, 0};
  for (int y = std::max(0, y0); y < std::min(img.height, y0 + side); ++y)
    for (int x = std::max(0, x0); x < std::min(img.width, x0 + side); ++x)
      for (int c = 0; c < 3; ++c) sum[c] += img.at(x, y, c % img.channels);
  const long long area = (long long)(side)*side;
  MeanColor m;
  m.r = int(sum[0] / area);
  m.g = int(sum[1] / area);
  m.b = int(sum[2] / area);
  return m;
}

void paint_pooled_panel(std::ostringstream& svg, const ImageU8& img,
                        const FoveaLayout& layout, Fixation fix,
                        int patch_side, int ox, int oy) {
  svg << "<rect x=\"" << ox << "\" y=\"" << oy << "\" width=\"" << img.width
      << "\" height=\"" << img.height << "\" fill=\"#111\"/>\n";
  // coarse regions first so the fovea's fine blocks paint over them
  for (int rf : {7, 5, 3, 1}) {
    for (const ActiveEntry& e : active_regions(layout, fix).entries) {
      const PoolingRegion& region = layout.regions()[size_t(e.region)];
      if (region.rf != rf) continue;
      const int half = rf / 2;
      const int x0 = std::max(0, (e.bx - half) * patch_side);
      const int y0 = std::max(0, (e.by - half) * patch_side);
      const int x1 = std::min(img.width, (e.bx + half + 1) * patch_side);
      const int y1 = std::min(img.height, (e.by + half + 1) * patch_side);
      if (x1 <= x0 || y1 <= y0) continue;
      const MeanColor m = region_mean(img, e.bx, e.by, rf, patch_side);
      svg << "<rect x=\"" << ox + x0 << "\" y=\"" << oy + y0 << "\" width=\""
          << x1 - x0 << "\" height=\"" << y1 - y0 << "\" fill=\"rgb(" << m.r
          << ',' << m.g << ',' << m.b << ")\"/>\n";
    }
  }
}

}  // namespace

std::string render_trace_overlay(const ImageU8& img, const TraceDoc& doc,
                                 const FoveaLayout& layout, int patch_side) {
  if (img.channels < 1) throw std::invalid_argument("overlay: empty image");
  for (const TraceStep& st : doc.steps)
    if (!in_grid(st.x, st.y))
      throw std::invalid_argument("overlay: fixation outside the grid");

  const int n = int(doc.steps.size());
  const int panels = 1 + n;
  const int width = panels * img.width + (panels + 1) * kGap;
  const int height = img.height + kBand + 2 * kGap;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << ' '
      << height << "\">\n";
  svg << "<defs><marker id=\"arrow\" viewBox=\"0 0 8 8\" refX=\"7\" "
         "refY=\"4\" markerWidth=\"6\" markerHeight=\"6\" "
         "orient=\"auto-start-reverse\"><path d=\"M0,0 L8,4 L0,8 z\" "
         "fill=\"#1f77ff\"/></marker></defs>\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"#222\"/>\n";

  const int top = kBand + kGap;
  // the traced image
  svg << "<text x=\"" << kGap << "\" y=\"" << kBand << "\" fill=\"#eee\" "
      << "font-family=\"monospace\" font-size=\"12\">" << doc.image
      << " fixations</text>\n";
  svg << "<image x=\"" << kGap << "\" y=\"" << top << "\" width=\""
      << img.width << "\" height=\"" << img.height
      << "\" href=\"data:image/png;base64," << base64_encode(encode_png(img))
      << "\"/>\n";

  // transition arrows under the circles
  for (int k = 0; k + 1 < n; ++k) {
    const int x0 = kGap + block_center_px(doc.steps[size_t(k)].x, patch_side);
    const int y0 = top + block_center_px(doc.steps[size_t(k)].y, patch_side);
    const int x1 =
        kGap + block_center_px(doc.steps[size_t(k) + 1].x, patch_side);
    const int y1 =
        top + block_center_px(doc.steps[size_t(k) + 1].y, patch_side);
    svg << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1
        << "\" y2=\"" << y1
        << "\" stroke=\"#1f77ff\" stroke-width=\"1.5\" "
           "marker-end=\"url(#arrow)\"/>\n";
  }
  // fixation circles, radius growing with order
  for (int k = 0; k < n; ++k) {
    const TraceStep& st = doc.steps[size_t(k)];
    const int cx = kGap + block_center_px(st.x, patch_side);
    const int cy = top + block_center_px(st.y, patch_side);
    svg << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\""
        << 4 + 2 * k
        << "\" fill=\"none\" stroke=\"#1f77ff\" stroke-width=\"2\"/>\n";
  }

  // one pooled-view panel per fixation
  for (int k = 0; k < n; ++k) {
    const TraceStep& st = doc.steps[size_t(k)];
    const int ox = kGap + (k + 1) * (img.width + kGap);
    svg << "<text x=\"" << ox << "\" y=\"" << kBand << "\" fill=\"#eee\" "
        << "font-family=\"monospace\" font-size=\"12\">" << k + 1 << ": class "
        << st.predicted << fmt(" p=%.3f", st.prob) << "</text>\n";
    paint_pooled_panel(svg, img, layout, Fixation{st.x, st.y}, patch_side, ox,
                       top);
    // fixation marker on the pooled view
    svg << "<circle cx=\"" << ox + block_center_px(st.x, patch_side)
        << "\" cy=\"" << top + block_center_px(st.y, patch_side)
        << "\" r=\"4\" fill=\"none\" stroke=\"#1f77ff\" "
           "stroke-width=\"2\"/>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace fovit
