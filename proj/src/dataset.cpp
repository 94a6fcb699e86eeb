#include "fovit/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <stdexcept>

#include "fovit/geometry.hpp"
#include "fovit/rng.hpp"

namespace fovit {

namespace {

using Pattern = std::array<uint8_t, 36>;

int hamming(const Pattern& a, const Pattern& b) {
  int d = 0;
  for (size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

Pattern random_pattern(std::mt19937& g) {
  std::array<int, 36> idx{};
  std::iota(idx.begin(), idx.end(), 0);
  // partial Fisher-Yates: the first kLitCells entries become the lit set
  for (int i = 0; i < SyntheticSpec::kLitCells; ++i) {
    const int j = i + int(uniform_below(g, uint32_t(36 - i)));
    std::swap(idx[size_t(i)], idx[size_t(j)]);
  }
  Pattern p{};
  for (int i = 0; i < SyntheticSpec::kLitCells; ++i) p[size_t(idx[size_t(i)])] = 1;
  return p;
}

std::vector<Pattern> make_patterns(const SyntheticSpec& spec) {
  std::mt19937 g = stream_rng(spec.seed, 0x70617474u /* "patt" */, 0);
  std::vector<Pattern> out;
  int rejections = 0;
  while (int(out.size()) < spec.classes) {
    Pattern cand = random_pattern(g);
    bool ok = true;
    for (const Pattern& p : out)
      if (hamming(p, cand) < spec.min_pattern_distance) {
        ok = false;
        break;
      }
    if (ok) {
      out.push_back(cand);
    } else if (++rejections > 100000) {
      throw std::runtime_error(
          "make_synthetic: cannot satisfy pattern distance; lower it");
    }
  }
  return out;
}

// Valid glyph top-left blocks: inside the border ring and not intersecting
// the central 4x4 block area, so neither a border-hugging nor a center-only
// view ever contains the class signal.
std::vector<GlyphPlacement> valid_placements() {
  std::vector<GlyphPlacement> out;
  const int g = SyntheticSpec::kGlyphBlocks;
  for (int gy = 1; gy + g <= kGridSide - 1; ++gy)
    for (int gx = 1; gx + g <= kGridSide - 1; ++gx) {
      const bool hits_center =
          gx + g > 5 && gx < 9 && gy + g > 5 && gy < 9;
      if (!hits_center) out.push_back({gx, gy});
    }
  return out;
}

Sample make_sample(const SyntheticSpec& spec, const Pattern& pattern,
                   int label, uint32_t split_tag, uint64_t index,
                   const std::vector<GlyphPlacement>& places) {
  std::mt19937 g = stream_rng(spec.seed, split_tag, index);
  Sample s;
  s.label = label;
  s.glyph = places[uniform_below(g, uint32_t(places.size()))];
  s.image = ImageU8::create(SyntheticSpec::kCanvas, SyntheticSpec::kCanvas, 3);

  // per-block gray base in [88, 168]
  std::array<int, size_t(kGridSide) * size_t(kGridSide)> base{};
  for (auto& b : base) b = 88 + int(uniform_below(g, 81));

  const int bp = SyntheticSpec::kBlockPx;
  for (int y = 0; y < SyntheticSpec::kCanvas; ++y) {
    for (int x = 0; x < SyntheticSpec::kCanvas; ++x) {
      const int b = base[size_t((y / bp) * kGridSide + (x / bp))];
      const int noise = int(std::lround(gauss(g) * 20.0));
      const uint8_t v =
          uint8_t(std::clamp(b + noise, 0, 255));
      s.image.at(x, y, 0) = v;
      s.image.at(x, y, 1) = v;
      s.image.at(x, y, 2) = v;
    }
  }

  // paint the glyph: lit cells amber, unlit cells black, no noise
  const int px0 = s.glyph.block_x * bp;
  const int py0 = s.glyph.block_y * bp;
  const int cp = SyntheticSpec::kCellPx;
  for (int cy = 0; cy < SyntheticSpec::kCells; ++cy) {
    for (int cx = 0; cx < SyntheticSpec::kCells; ++cx) {
      const bool lit = pattern[size_t(cy * SyntheticSpec::kCells + cx)] != 0;
      const uint8_t r = lit ? 255 : 0;
      const uint8_t gr = lit ? 180 : 0;
      const uint8_t bl = lit ? 40 : 0;
      for (int py = 0; py < cp; ++py)
        for (int px = 0; px < cp; ++px) {
          const int x = px0 + cx * cp + px;
          const int y = py0 + cy * cp + py;
          s.image.at(x, y, 0) = r;
          s.image.at(x, y, 1) = gr;
          s.image.at(x, y, 2) = bl;
        }
    }
  }
  return s;
}

Dataset make_split(const SyntheticSpec& spec,
                   const std::vector<Pattern>& patterns, int per_class,
                   uint32_t split_tag) {
  Dataset d;
  for (int c = 0; c < spec.classes; ++c)
    d.class_names.push_back("class" + std::to_string(c));
  const std::vector<GlyphPlacement> places = valid_placements();
  uint64_t index = 0;
  for (int c = 0; c < spec.classes; ++c)
    for (int j = 0; j < per_class; ++j)
      d.samples.push_back(make_sample(spec, patterns[size_t(c)], c, split_tag,
                                      index++, places));
  return d;
}

}  // namespace

SyntheticBundle make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.train_per_class < 1)
    throw std::invalid_argument("make_synthetic: bad spec");
  SyntheticBundle b;
  b.patterns = make_patterns(spec);
  b.train = make_split(spec, b.patterns, spec.train_per_class, 0);
  b.val = make_split(spec, b.patterns, spec.val_per_class, 1);
  b.test = make_split(spec, b.patterns, spec.test_per_class, 2);
  return b;
}

Dataset load_folder_dataset(const std::string& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root))
    throw std::runtime_error("load_folder_dataset: not a directory: " + root);
  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty())
    throw std::runtime_error("load_folder_dataset: no class directories");
  Dataset d;
  for (size_t c = 0; c < class_dirs.size(); ++c) {
    d.class_names.push_back(class_dirs[c]);
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(fs::path(root) / class_dirs[c])) {
      const std::string ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".ppm" || ext == ".pgm"))
        files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    for (const std::string& f : files) {
      Sample s;
      s.image = read_pnm(f);
      s.label = int(c);
      d.samples.push_back(std::move(s));
    }
  }
  if (d.samples.empty())
    throw std::runtime_error("load_folder_dataset: no images found");
  return d;
}

}  // namespace fovit
