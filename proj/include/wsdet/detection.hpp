#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "wsdet/error.hpp"
#include "wsdet/geometry.hpp"

namespace wsdet {

// Where a box came from; carried through fusion so pseudo-labels stay
// attributable.
enum class Source { kTeacher, kCam, kGroundTruth };

inline std::string_view to_string(Source s) {
  switch (s) {
    case Source::kTeacher:
      return "teacher";
    case Source::kCam:
      return "cam";
    case Source::kGroundTruth:
      return "ground-truth";
  }
  return "unknown";
}

inline std::optional<Source> parse_source(std::string_view name) {
  if (name == "teacher") return Source::kTeacher;
  if (name == "cam") return Source::kCam;
  if (name == "ground-truth") return Source::kGroundTruth;
  return std::nullopt;
}

struct Detection {
  double score = 0.0;
  Box box;
  Source source = Source::kTeacher;

  friend bool operator==(const Detection&, const Detection&) = default;
};

inline bool is_valid(const Detection& d) {
  return d.score >= 0.0 && d.score <= 1.0 && is_valid(d.box);
}

inline Detection make_detection(double score, const Box& box, Source source) {
  Detection d{score, box, source};
  require(d.score >= 0.0 && d.score <= 1.0,
          "detection score must lie in [0, 1]");
  require(is_valid(box), "invalid detection box " + to_string(box));
  return d;
}

}  // namespace wsdet
