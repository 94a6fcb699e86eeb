#pragma once

#include <string>
#include <vector>

#include "fovit/episode.hpp"

namespace fovit {

// One fixation of an episode as it appears in a trace file. Maps are 14x14,
// row-major.
struct TraceStep {
  int x = 0;
  int y = 0;
  int predicted = -1;
  double prob = 0;
  std::vector<double> evidence;
  std::vector<double> inhibition;
};

// Text-serializable episode record. Values are printed with enough digits
// that emit -> parse -> emit is the identity.
struct TraceDoc {
  std::string image;  // identifier, no whitespace
  int capacity = 0;
  int label = -1;
  long long cost = 0;
  int stop_index = -1;
  std::vector<TraceStep> steps;
};

std::string emit_trace(const TraceDoc& doc);
TraceDoc parse_trace(const std::string& text);

template <typename S>
TraceDoc trace_from_episode(const EpisodeTrace<S>& trace, std::string image_id,
                            int label, int capacity) {
  TraceDoc doc;
  doc.image = std::move(image_id);
  doc.capacity = capacity;
  doc.label = label;
  doc.cost = trace.cost;
  doc.stop_index = trace.stop_index;
  for (const FixationStep<S>& st : trace.steps) {
    TraceStep out;
    out.x = st.fix.x;
    out.y = st.fix.y;
    out.predicted = st.predicted;
    out.prob = double(st.max_prob);
    out.evidence.reserve(size_t(st.evidence.size()));
    out.inhibition.reserve(size_t(st.inhibition.size()));
    for (Eigen::Index r = 0; r < st.evidence.rows(); ++r)
      for (Eigen::Index c = 0; c < st.evidence.cols(); ++c)
        out.evidence.push_back(double(st.evidence(r, c)));
    for (Eigen::Index r = 0; r < st.inhibition.rows(); ++r)
      for (Eigen::Index c = 0; c < st.inhibition.cols(); ++c)
        out.inhibition.push_back(double(st.inhibition(r, c)));
    doc.steps.push_back(std::move(out));
  }
  return doc;
}

}  // namespace fovit
