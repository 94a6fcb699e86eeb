#include "fovit/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>

namespace fovit {

namespace {

// Skips whitespace and '#' comments between PNM header fields.
int next_pnm_int(std::istream& in) {
  int c = in.get();
  while (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '#') {
    if (c == '#')
      while (c != '\n' && c != EOF) c = in.get();
    c = in.get();
  }
  int value = 0;
  bool any = false;
  while (c >= '0' && c <= '9') {
    value = value * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) throw std::runtime_error("pnm: malformed header");
  return value;
}

void put_be32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[4],
               const std::vector<uint8_t>& payload) {
  put_be32(out, uint32_t(payload.size()));
  const size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, out.data() + crc_start, uInt(out.size() - crc_start));
  put_be32(out, crc);
}

}  // namespace

ImageU8 read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_pnm: cannot open " + path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  int channels;
  if (magic[0] == 'P' && magic[1] == '6')
    channels = 3;
  else if (magic[0] == 'P' && magic[1] == '5')
    channels = 1;
  else
    throw std::runtime_error("read_pnm: not a binary PPM/PGM: " + path);
  const int w = next_pnm_int(in);
  const int h = next_pnm_int(in);
  const int maxval = next_pnm_int(in);
  if (maxval != 255)
    throw std::runtime_error("read_pnm: only 8-bit images supported");
  ImageU8 img = ImageU8::create(w, h, channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          std::streamsize(img.pixels.size()));
  if (!in) throw std::runtime_error("read_pnm: truncated data in " + path);
  return img;
}

void write_pnm(const std::string& path, const ImageU8& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_pnm: cannot open " + path);
  out << (img.channels == 3 ? "P6" : "P5") << "\n"
      << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            std::streamsize(img.pixels.size()));
  if (!out) throw std::runtime_error("write_pnm: write failed " + path);
}

std::vector<uint8_t> encode_png(const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument("encode_png: 1 or 3 channels only");
  // raw scanlines, each prefixed with filter byte 0
  const size_t stride = size_t(img.width) * size_t(img.channels);
  std::vector<uint8_t> raw;
  raw.reserve((stride + 1) * size_t(img.height));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);
    const uint8_t* row = img.pixels.data() + size_t(y) * stride;
    raw.insert(raw.end(), row, row + stride);
  }
  uLongf bound = compressBound(uLong(raw.size()));
  std::vector<uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), uLong(raw.size()), 6) !=
      Z_OK)
    throw std::runtime_error("encode_png: deflate failed");
  compressed.resize(bound);

  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<uint8_t> ihdr;
  put_be32(ihdr, uint32_t(img.width));
  put_be32(ihdr, uint32_t(img.height));
  ihdr.push_back(8);                                // bit depth
  ihdr.push_back(img.channels == 3 ? 2 : 0);        // color type
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", compressed);
  put_chunk(out, "IEND", {});
  return out;
}

std::string base64_encode(const std::vector<uint8_t>& bytes) {
  static const char* table =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 3 <= bytes.size(); i += 3) {
    const uint32_t v = (uint32_t(bytes[i]) << 16) |
                       (uint32_t(bytes[i + 1]) << 8) | bytes[i + 2];
    out.push_back(table[(v >> 18) & 63]);
    out.push_back(table[(v >> 12) & 63]);
    out.push_back(table[(v >> 6) & 63]);
    out.push_back(table[v & 63]);
  }
  if (i + 1 == bytes.size()) {
    const uint32_t v = uint32_t(bytes[i]) << 16;
    out.push_back(table[(v >> 18) & 63]);
    out.push_back(table[(v >> 12) & 63]);
    out += "==";
  } else if (i + 2 == bytes.size()) {
    const uint32_t v = (uint32_t(bytes[i]) << 16) | (uint32_t(bytes[i + 1]) << 8);
    out.push_back(table[(v >> 18) & 63]);
    out.push_back(table[(v >> 12) & 63]);
    out.push_back(table[(v >> 6) & 63]);
    out += "=";
  }
  return out;
}

ImageU8 fit_to_model(const ImageU8& img, int side, int channels) {
  if (side <= 0 || (channels != 1 && channels != 3))
    throw std::invalid_argument("fit_to_model: bad target");
  if (img.width == side && img.height == side && img.channels == channels)
    return img;

  ImageU8 colored = img;
  if (img.channels != channels) {
    colored = ImageU8::create(img.width, img.height, channels);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        if (channels == 3) {
          for (int c = 0; c < 3; ++c) colored.at(x, y, c) = img.at(x, y, 0);
        } else {
          const int sum = img.at(x, y, 0) + img.at(x, y, 1) + img.at(x, y, 2);
          colored.at(x, y, 0) = uint8_t(sum / 3);
        }
      }
  }

  const int crop = std::min(colored.width, colored.height);
  const int ox = (colored.width - crop) / 2;
  const int oy = (colored.height - crop) / 2;
  ImageU8 out = ImageU8::create(side, side, channels);
  for (int y = 0; y < side; ++y) {
    const int sy = oy + int((int64_t(y) * crop) / side);
    for (int x = 0; x < side; ++x) {
      const int sx = ox + int((int64_t(x) * crop) / side);
      for (int c = 0; c < channels; ++c)
        out.at(x, y, c) = colored.at(sx, sy, c);
    }
  }
  return out;
}

}  // namespace fovit
