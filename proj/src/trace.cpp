#include "fovit/trace.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace fovit {

namespace {

constexpr const char* kMagic = "fovit-trace 1";

// shortest representation that parses back to the same double
std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void emit_map(std::ostringstream& out, const char* name,
              const std::vector<double>& map) {
  if (map.size() != size_t(kGridBlocks))
    throw std::invalid_argument("emit_trace: map must have 196 entries");
  out << name << "\n";
  for (int r = 0; r < kGridSide; ++r) {
    for (int c = 0; c < kGridSide; ++c) {
      if (c) out << ' ';
      out << num(map[size_t(r * kGridSide + c)]);
    }
    out << "\n";
  }
}

struct Reader {
  std::istringstream in;
  int line_no = 0;

  explicit Reader(const std::string& text) : in(text) {}

  std::string line() {
    std::string l;
    if (!std::getline(in, l))
      throw std::runtime_error("trace: unexpected end of file");
    ++line_no;
    return l;
  }
  [[noreturn]] void fail(const std::string& what) {
    throw std::runtime_error("trace: line " + std::to_string(line_no) + ": " +
                             what);
  }
};

std::vector<double> parse_map(Reader& r) {
  std::vector<double> map;
  map.reserve(size_t(kGridBlocks));
  for (int row = 0; row < kGridSide; ++row) {
    std::istringstream ls(r.line());
    double v;
    int got = 0;
    while (ls >> v) {
      map.push_back(v);
      ++got;
    }
    if (got != kGridSide) r.fail("expected 14 values per map row");
  }
  return map;
}

}  // namespace

std::string emit_trace(const TraceDoc& doc) {
  if (doc.image.empty() ||
      doc.image.find_first_of(" \t\n") != std::string::npos)
    throw std::invalid_argument(
        "emit_trace: image id must be a non-empty single token");
  for (const TraceStep& st : doc.steps)
    if (!in_grid(st.x, st.y))
      throw std::invalid_argument("emit_trace: fixation outside the grid");

  std::ostringstream out;
  out << kMagic << "\n";
  out << "image " << doc.image << "\n";
  out << "capacity " << doc.capacity << "\n";
  out << "label " << doc.label << "\n";
  out << "cost " << doc.cost << "\n";
  out << "stop_index " << doc.stop_index << "\n";
  out << "steps " << doc.steps.size() << "\n";
  for (size_t k = 0; k < doc.steps.size(); ++k) {
    const TraceStep& st = doc.steps[k];
    out << "step " << k << " fix " << st.x << ' ' << st.y << " pred "
        << st.predicted << " prob " << num(st.prob) << "\n";
    emit_map(out, "evidence", st.evidence);
    emit_map(out, "inhibition", st.inhibition);
  }
  out << "end\n";
  return out.str();
}

TraceDoc parse_trace(const std::string& text) {
  Reader r(text);
  if (r.line() != kMagic) r.fail("bad header");

  TraceDoc doc;
  auto field = [&](const char* key) -> std::string {
    std::istringstream ls(r.line());
    std::string k, v;
    ls >> k >> v;
    if (k != key || v.empty()) r.fail(std::string("expected '") + key + "'");
    return v;
  };
  doc.image = field("image");
  doc.capacity = std::stoi(field("capacity"));
  doc.label = std::stoi(field("label"));
  doc.cost = std::stoll(field("cost"));
  doc.stop_index = std::stoi(field("stop_index"));
  const int n_steps = std::stoi(field("steps"));
  if (n_steps < 0) r.fail("negative step count");

  for (int k = 0; k < n_steps; ++k) {
    std::istringstream ls(r.line());
    std::string w_step, w_fix, w_pred, w_prob;
    int index;
    TraceStep st;
    ls >> w_step >> index >> w_fix >> st.x >> st.y >> w_pred >> st.predicted >>
        w_prob >> st.prob;
    if (!ls || w_step != "step" || w_fix != "fix" || w_pred != "pred" ||
        w_prob != "prob")
      r.fail("malformed step line");
    if (index != k) r.fail("step index out of order");
    if (!in_grid(st.x, st.y)) r.fail("fixation outside the grid");
    if (r.line() != "evidence") r.fail("expected 'evidence'");
    st.evidence = parse_map(r);
    if (r.line() != "inhibition") r.fail("expected 'inhibition'");
    st.inhibition = parse_map(r);
    doc.steps.push_back(std::move(st));
  }
  if (r.line() != "end") r.fail("expected 'end'");
  return doc;
}

}  // namespace fovit
