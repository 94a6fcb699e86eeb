#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fovit/image.hpp"

namespace fovit {

// Where a sample's glyph was placed (top-left block on the 14x14 grid);
// {-1, -1} when unknown (e.g. folder datasets). Used by tests and overlays.
struct GlyphPlacement {
  int block_x = -1;
  int block_y = -1;
};

struct Sample {
  ImageU8 image;
  int label = -1;
  GlyphPlacement glyph;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;
};

// Synthetic classification corpus: each image hides one 3x3-block glyph
// (a 6x6 grid of 4px cells, half of them lit amber) in a noisy gray
// background, alongside `decoys` distractor glyphs drawn in the same palette
// but carrying no class pattern. Every glyph lights the same number of
// cells, so mean intensity carries no class signal; the cell pattern does —
// and from the blurred periphery the decoys look just like the target, so
// confident classification requires searching the salient spots with the
// fovea. Glyphs never overlap the central 4x4 blocks nor the border ring,
// so a center crop is uninformative and the model has to look around.
struct SyntheticSpec {
  int classes = 10;
  int train_per_class = 400;
  int val_per_class = 40;
  int test_per_class = 100;
  uint64_t seed = 7;
  int min_pattern_distance = 12;  // pairwise Hamming distance between classes
  int decoys = 3;  // distractor glyphs per image, same palette, no class

  static constexpr int kCanvas = 112;
  static constexpr int kBlockPx = 8;
  static constexpr int kGlyphBlocks = 3;
  static constexpr int kCellPx = 4;
  static constexpr int kCells = 6;       // glyph is kCells x kCells cells
  static constexpr int kLitCells = 18;   // exactly half, equal across classes
};

struct SyntheticBundle {
  Dataset train, val, test;
  // per class: row-major cell mask, 1 = lit
  std::vector<std::array<uint8_t, 36>> patterns;
};

SyntheticBundle make_synthetic(const SyntheticSpec& spec);

// One directory per class (sorted name order = label order), binary PPM/PGM
// files inside (sorted name order).
Dataset load_folder_dataset(const std::string& root);

}  // namespace fovit
