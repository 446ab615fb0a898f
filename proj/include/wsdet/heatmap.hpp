#pragma once

// Class-activation heatmap to pseudo-label boxes: binarize at tau, label
// connected components, drop components outside the pixel-area gates and
// emit the tight bounding box of every survivor.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "wsdet/detection.hpp"
#include "wsdet/error.hpp"
#include "wsdet/geometry.hpp"

namespace wsdet {

class Heatmap {
 public:
  Heatmap(int width, int height, std::vector<float> values)
      : width_(width), height_(height), values_(std::move(values)) {
    require(width > 0 && height > 0, "heatmap dimensions must be positive");
    require(values_.size() ==
                static_cast<std::size_t>(width) * static_cast<std::size_t>(height),
            "heatmap value count does not match width * height");
    for (float v : values_) {
      // Written as a negated range test so NaN is rejected as well.
      require(v >= 0.0f && v <= 1.0f, "heatmap values must lie in [0, 1]");
    }
  }

  Heatmap(int width, int height)
      : Heatmap(width, height,
                std::vector<float>(static_cast<std::size_t>(std::max(width, 0)) *
                                   static_cast<std::size_t>(std::max(height, 0)))) {}

  int width() const { return width_; }
  int height() const { return height_; }
  const std::vector<float>& values() const { return values_; }

  float at(int x, int y) const { return values_[index(x, y)]; }

  void set(int x, int y, float v) {
    require(v >= 0.0f && v <= 1.0f, "heatmap values must lie in [0, 1]");
    values_[index(x, y)] = v;
  }

  friend bool operator==(const Heatmap&, const Heatmap&) = default;

 private:
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int width_;
  int height_;
  std::vector<float> values_;
};

enum class Connectivity { kFour = 4, kEight = 8 };

struct Pixel {
  int x = 0;
  int y = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
  friend auto operator<=>(const Pixel& a, const Pixel& b) {
    if (auto c = a.y <=> b.y; c != 0) return c;
    return a.x <=> b.x;
  }
};

// One connected component; pixels are kept in raster (row-major) order.
struct ComponentMask {
  std::vector<Pixel> pixels;

  std::size_t pixel_area() const { return pixels.size(); }

  // Tight half-open bounding box of the component.
  Box bounds() const {
    int min_x = std::numeric_limits<int>::max();
    int min_y = std::numeric_limits<int>::max();
    int max_x = std::numeric_limits<int>::min();
    int max_y = std::numeric_limits<int>::min();
    for (const Pixel& p : pixels) {
      min_x = std::min(min_x, p.x);
      min_y = std::min(min_y, p.y);
      max_x = std::max(max_x, p.x);
      max_y = std::max(max_y, p.y);
    }
    return Box{static_cast<double>(min_x), static_cast<double>(min_y),
               static_cast<double>(max_x + 1), static_cast<double>(max_y + 1)};
  }
};

inline constexpr double kDefaultCamThreshold = 0.5;
inline constexpr std::size_t kDefaultMinArea = 32 * 32;
inline constexpr std::size_t kDefaultMaxArea = 1024 * 1024;

// Keeps values strictly above tau, zeroes the rest.
inline Heatmap binarize(const Heatmap& h, double tau) {
  require(tau > 0.0 && tau < 1.0, "binarize threshold must lie in (0, 1)");
  std::vector<float> out(h.values());
  for (float& v : out) {
    if (!(static_cast<double>(v) > tau)) v = 0.0f;
  }
  return Heatmap(h.width(), h.height(), std::move(out));
}

// Labels the non-zero pixels of h. Components are ordered by the minimum
// row they touch, then the minimum column, then their first raster pixel.
inline std::vector<ComponentMask> connected_components(
    const Heatmap& h, Connectivity connectivity = Connectivity::kEight) {
  const int w = h.width();
  const int ht = h.height();
  std::vector<std::int32_t> label(static_cast<std::size_t>(w) * ht, -1);
  std::vector<ComponentMask> comps;

  static constexpr int kDx[8] = {1, -1, 0, 0, 1, 1, -1, -1};
  static constexpr int kDy[8] = {0, 0, 1, -1, 1, -1, 1, -1};
  const int neighbours = connectivity == Connectivity::kFour ? 4 : 8;

  std::vector<Pixel> stack;
  for (int y = 0; y < ht; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * w + x;
      if (h.values()[idx] == 0.0f || label[idx] >= 0) continue;
      const auto id = static_cast<std::int32_t>(comps.size());
      ComponentMask comp;
      label[idx] = id;
      stack.push_back({x, y});
      while (!stack.empty()) {
        const Pixel p = stack.back();
        stack.pop_back();
        comp.pixels.push_back(p);
        for (int k = 0; k < neighbours; ++k) {
          const int nx = p.x + kDx[k];
          const int ny = p.y + kDy[k];
          if (nx < 0 || ny < 0 || nx >= w || ny >= ht) continue;
          const std::size_t nidx = static_cast<std::size_t>(ny) * w + nx;
          if (h.values()[nidx] == 0.0f || label[nidx] >= 0) continue;
          label[nidx] = id;
          stack.push_back({nx, ny});
        }
      }
      std::sort(comp.pixels.begin(), comp.pixels.end());
      comps.push_back(std::move(comp));
    }
  }

  // Raster discovery already orders by minimum row; re-sort for the
  // column key.
  std::stable_sort(comps.begin(), comps.end(),
                   [](const ComponentMask& a, const ComponentMask& b) {
                     const Box ba = a.bounds();
                     const Box bb = b.bounds();
                     if (ba.y0 != bb.y0) return ba.y0 < bb.y0;
                     return ba.x0 < bb.x0;
                   });
  return comps;
}

struct CamBoxOptions {
  double tau = kDefaultCamThreshold;
  double score = 1.0;
  std::size_t min_area = kDefaultMinArea;
  std::size_t max_area = kDefaultMaxArea;
  Connectivity connectivity = Connectivity::kEight;
};

// Components whose pixel area is strictly below min_area or strictly above
// max_area are dropped; every surviving box carries the same score.
inline std::vector<Detection> cam_to_boxes(const Heatmap& h,
                                           const CamBoxOptions& opts = {}) {
  require(opts.min_area < opts.max_area, "min_area must be below max_area");
  require(opts.score >= 0.0 && opts.score <= 1.0,
          "cam confidence score must lie in [0, 1]");
  std::vector<Detection> out;
  for (const ComponentMask& comp :
       connected_components(binarize(h, opts.tau), opts.connectivity)) {
    const std::size_t a = comp.pixel_area();
    if (a < opts.min_area || a > opts.max_area) continue;
    out.push_back(Detection{opts.score, comp.bounds(), Source::kCam});
  }
  return out;
}

}  // namespace wsdet
