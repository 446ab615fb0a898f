#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "wsdet/error.hpp"

namespace wsdet {

// Dense per-cell feature vectors, cell-major / channel-last:
// value(x, y, c) = values[(y * width + x) * channels + c].
struct FeatureGrid {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> values;

  FeatureGrid() = default;
  FeatureGrid(int w, int h, int c)
      : width(w), height(h), channels(c),
        values(static_cast<std::size_t>(w) * h * c, 0.0f) {
    require(w > 0 && h > 0 && c > 0, "feature grid dimensions must be positive");
  }

  std::size_t cells() const { return static_cast<std::size_t>(width) * height; }

  std::span<const float> cell(std::size_t index) const {
    return std::span<const float>(values).subspan(index * channels, channels);
  }
  std::span<float> cell(std::size_t index) {
    return std::span<float>(values).subspan(index * channels, channels);
  }

  float& at(int x, int y, int c) {
    return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int x, int y, int c) const {
    return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;
};

}  // namespace wsdet
