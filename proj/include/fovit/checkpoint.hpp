#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fovit/tape.hpp"

namespace fovit {

// Checkpoint file layout: a text header listing every tensor with its shape
// and byte offset, then a "data" line, then the raw coefficients
// (column-major, little-endian, in header order). The meta line carries one
// free-form single-line string (callers put resolved-config JSON there).
//
//   fovit-checkpoint 1
//   meta <one line>
//   tensor <name> <rows> <cols> <f32|f64> <offset>
//   data
//   <binary payload>

namespace detail {

template <typename S>
const char* dtype_tag();
template <>
inline const char* dtype_tag<float>() {
  return "f32";
}
template <>
inline const char* dtype_tag<double>() {
  return "f64";
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Mat<S>*>>&
                         tensors,
                     const std::string& meta = "") {
  if (meta.find('\n') != std::string::npos)
    throw std::invalid_argument("save_checkpoint: meta must be one line");
  std::ostringstream header;
  header << "fovit-checkpoint 1\n";
  header << "meta " << meta << "\n";
  uint64_t offset = 0;
  for (const auto& [name, mat] : tensors) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos)
      throw std::invalid_argument("save_checkpoint: bad tensor name");
    header << "tensor " << name << " " << mat->rows() << " " << mat->cols()
           << " " << detail::dtype_tag<S>() << " " << offset << "\n";
    offset += uint64_t(mat->size()) * sizeof(S);
  }
  header << "data\n";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  const std::string h = header.str();
  out.write(h.data(), std::streamsize(h.size()));
  for (const auto& [name, mat] : tensors)
    out.write(reinterpret_cast<const char*>(mat->data()),
              std::streamsize(uint64_t(mat->size()) * sizeof(S)));
  if (!out) throw std::runtime_error("save_checkpoint: write failed " + path);
}

template <typename S>
struct Checkpoint {
  std::string meta;
  std::map<std::string, Mat<S>> tensors;
};

template <typename S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "fovit-checkpoint 1")
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  Checkpoint<S> ck;
  if (!std::getline(in, line) || line.rfind("meta", 0) != 0)
    throw std::runtime_error("load_checkpoint: missing meta line");
  ck.meta = line.size() > 5 ? line.substr(5) : "";
  struct Entry {
    std::string name;
    Eigen::Index rows, cols;
    uint64_t offset;
  };
  std::vector<Entry> entries;
  while (std::getline(in, line)) {
    if (line == "data") break;
    std::istringstream ls(line);
    std::string tag, name, dtype;
    Entry e;
    if (!(ls >> tag >> e.name >> e.rows >> e.cols >> dtype >> e.offset) ||
        tag != "tensor")
      throw std::runtime_error("load_checkpoint: bad tensor line: " + line);
    if (dtype != detail::dtype_tag<S>())
      throw std::runtime_error("load_checkpoint: dtype mismatch for " +
                               e.name);
    entries.push_back(e);
  }
  if (line != "data")
    throw std::runtime_error("load_checkpoint: missing data section");
  const std::streampos data_start = in.tellg();
  for (const Entry& e : entries) {
    Mat<S> m(e.rows, e.cols);
    in.seekg(data_start + std::streamoff(e.offset));
    in.read(reinterpret_cast<char*>(m.data()),
            std::streamsize(uint64_t(m.size()) * sizeof(S)));
    if (!in)
      throw std::runtime_error("load_checkpoint: truncated data for " +
                               e.name);
    if (!ck.tensors.emplace(e.name, std::move(m)).second)
      throw std::runtime_error("load_checkpoint: duplicate tensor " + e.name);
  }
  return ck;
}

}  // namespace fovit
