#pragma once

// Axis-aligned boxes on the image lattice. Boxes are half-open:
// [x0, x1) x [y0, y1), so a box covering pixel (x, y) alone is
// (x, y, x + 1, y + 1).

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <string>

#include "wsdet/error.hpp"

namespace wsdet {

struct Box {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 0.0;
  double y1 = 0.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double center_x() const { return 0.5 * (x0 + x1); }
  double center_y() const { return 0.5 * (y0 + y1); }

  friend bool operator==(const Box&, const Box&) = default;
};

inline bool is_valid(const Box& b) {
  return std::isfinite(b.x0) && std::isfinite(b.y0) && std::isfinite(b.x1) &&
         std::isfinite(b.y1) && b.x0 >= 0.0 && b.y0 >= 0.0 && b.x0 < b.x1 &&
         b.y0 < b.y1;
}

inline std::string to_string(const Box& b) {
  std::ostringstream os;
  os << "[" << b.x0 << ", " << b.y0 << ", " << b.x1 << ", " << b.y1 << "]";
  return os.str();
}

// Checked constructor.
inline Box make_box(double x0, double y0, double x1, double y1) {
  Box b{x0, y0, x1, y1};
  require(is_valid(b), "invalid box " + to_string(b) +
                           ": need finite, non-negative x0 < x1 and y0 < y1");
  return b;
}

inline double area(const Box& b) { return b.width() * b.height(); }

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

inline double iou(const Box& a, const Box& b) {
  // Exact identity short-circuit keeps iou(a, a) == 1.0 bit-for-bit.
  if (a == b) return 1.0;
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = area(a) + area(b) - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// Smallest box with integer corners containing b (outward rounding), used
// when a continuous box has to be mapped onto pixels.
inline Box rasterize(const Box& b) {
  return Box{std::floor(b.x0), std::floor(b.y0), std::ceil(b.x1),
             std::ceil(b.y1)};
}

// Intersection of b with [0, width) x [0, height); invalid when b lies
// outside the frame.
inline Box clip(const Box& b, double width, double height) {
  return Box{std::clamp(b.x0, 0.0, width), std::clamp(b.y0, 0.0, height),
             std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height)};
}

inline std::array<double, 4> to_array(const Box& b) {
  return {b.x0, b.y0, b.x1, b.y1};
}

}  // namespace wsdet
