#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace fovit {

// Interleaved 8-bit image, row-major. 1 channel (gray) or 3 (RGB).
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<uint8_t> pixels;

  static ImageU8 create(int w, int h, int c, uint8_t fill = 0) {
    if (w <= 0 || h <= 0 || (c != 1 && c != 3))
      throw std::invalid_argument("ImageU8: bad dimensions");
    ImageU8 img;
    img.width = w;
    img.height = h;
    img.channels = c;
    img.pixels.assign(size_t(w) * size_t(h) * size_t(c), fill);
    return img;
  }

  size_t index(int x, int y, int c) const {
    return (size_t(y) * size_t(width) + size_t(x)) * size_t(channels) +
           size_t(c);
  }
  uint8_t at(int x, int y, int c) const { return pixels[index(x, y, c)]; }
  uint8_t& at(int x, int y, int c) { return pixels[index(x, y, c)]; }
};

// Binary PPM/PGM (P6/P5), 8-bit.
ImageU8 read_pnm(const std::string& path);
void write_pnm(const std::string& path, const ImageU8& img);

// Adapts a decoded image to the model's raster: gray replicated to RGB (or
// RGB averaged to gray), center-cropped square, nearest-neighbor resized to
// side x side. An already-conformant image comes back as a bitwise copy.
ImageU8 fit_to_model(const ImageU8& img, int side, int channels);

// PNG bytes (8-bit gray or RGB), for embedding into SVG data URIs.
std::vector<uint8_t> encode_png(const ImageU8& img);

std::string base64_encode(const std::vector<uint8_t>& bytes);

}  // namespace fovit
