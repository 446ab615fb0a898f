#pragma once

// Synthetic lesion images, annotation records and the partially-labelled
// protocol splitter.
//
// A synthetic image is a pixel canvas with 0..max_blobs Gaussian blobs plus
// noise. It is never stored: the generator reduces it to a per-cell feature
// grid (the detector input) and renders a CAM-like heatmap next to it. The
// ground-truth box of a blob bounds its half-maximum contour, i.e.
// center +/- sigma * sqrt(2 ln 2) on each axis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "wsdet/detection.hpp"
#include "wsdet/error.hpp"
#include "wsdet/feature_grid.hpp"
#include "wsdet/geometry.hpp"
#include "wsdet/heatmap.hpp"
#include "wsdet/random.hpp"

namespace wsdet {

enum class AnnotationKind { kFull, kWeak };

struct AnnotationRecord {
  std::string image_id;
  AnnotationKind kind = AnnotationKind::kFull;
  std::vector<Box> boxes;  // fully annotated only
  int image_class = 0;     // 1 = lesion present
  double classifier_score = 0.0;
  FeatureGrid features;
  std::optional<Heatmap> heatmap;
  std::optional<std::string> auxiliary_image_id;

  bool is_full() const { return kind == AnnotationKind::kFull; }
};

inline void validate(const AnnotationRecord& r) {
  require(!r.image_id.empty(), "record has an empty image_id");
  require(r.image_class == 0 || r.image_class == 1,
          r.image_id + ": image class must be 0 or 1");
  if (r.is_full()) {
    require(r.boxes.empty() || r.image_class == 1,
            r.image_id + ": annotated boxes imply class 1");
    for (const Box& b : r.boxes) require(is_valid(b), r.image_id + ": invalid box");
  } else {
    require(r.boxes.empty(), r.image_id + ": weakly annotated record carries boxes");
  }
}

// Ground-truth boxes as detections with score 1.
inline std::vector<Detection> ground_truth_detections(const AnnotationRecord& r) {
  std::vector<Detection> out;
  out.reserve(r.boxes.size());
  for (const Box& b : r.boxes) out.push_back(Detection{1.0, b, Source::kGroundTruth});
  return out;
}

struct SplitProtocol {
  double ratio = 1.0;  // fraction that keeps its boxes; 1 = fully labelled
};

struct SplitDataset {
  std::vector<AnnotationRecord> fully;
  std::vector<AnnotationRecord> weakly;
  SplitProtocol protocol;
};

struct Blob {
  double cx = 0.0;
  double cy = 0.0;
  double sigma = 1.0;
  double amplitude = 1.0;

  double half_max_radius() const { return sigma * std::sqrt(2.0 * std::log(2.0)); }
};

struct SyntheticConfig {
  int image_width = 64;
  int image_height = 64;
  int grid_w = 8;
  int grid_h = 8;
  int min_blobs = 0;
  int max_blobs = 3;
  double sigma_min = 2.5;
  double sigma_max = 4.5;
  double amplitude_min = 0.6;
  double amplitude_max = 1.0;
  double min_gap = 4.0;  // pixels between half-max discs of distinct blobs
  double pixel_noise = 0.15;
  double feature_floor = 0.3;  // intensity treated as background by features
  // Auxiliary view: same lesions, independent noise, jittered position.
  double aux_jitter = 1.0;
  // CAM rendering.
  double cam_blur_sigma = 1.5;
  double cam_noise = 0.05;
  double cam_jitter = 1.5;
  double cam_gain_min = 0.8;
  double cam_gain_max = 1.25;
  double cam_miss_rate = 0.1;  // chance that a lesion is absent from the CAM

  int channels_per_view() const { return 5; }
  int feature_dim() const { return 2 * channels_per_view(); }
  double cell_w() const { return static_cast<double>(image_width) / grid_w; }
  double cell_h() const { return static_cast<double>(image_height) / grid_h; }
};

inline void validate(const SyntheticConfig& c) {
  require(c.image_width > 0 && c.image_height > 0, "image size must be positive");
  require(c.grid_w > 0 && c.grid_h > 0, "grid size must be positive");
  require(c.image_width % c.grid_w == 0 && c.image_height % c.grid_h == 0,
          "image size must be a multiple of the grid size");
  require(c.min_blobs >= 0 && c.min_blobs <= c.max_blobs, "need 0 <= min_blobs <= max_blobs");
  require(c.sigma_min > 0.0 && c.sigma_min <= c.sigma_max, "need 0 < sigma_min <= sigma_max");
  require(c.amplitude_min > 0.0 && c.amplitude_min <= c.amplitude_max,
          "need 0 < amplitude_min <= amplitude_max");
  require(c.pixel_noise >= 0.0 && c.cam_noise >= 0.0 && c.cam_blur_sigma >= 0.0,
          "noise levels must be non-negative");
  require(c.cam_gain_min > 0.0 && c.cam_gain_min <= c.cam_gain_max,
          "need 0 < cam_gain_min <= cam_gain_max");
  require(c.cam_miss_rate >= 0.0 && c.cam_miss_rate <= 1.0, "cam_miss_rate must lie in [0, 1]");
}

// Synthetic-scale CAM area gates: at least 4 pixels, at most a quarter of
// the image.
inline CamBoxOptions synthetic_cam_options(const SyntheticConfig& c) {
  CamBoxOptions o;
  o.min_area = 4;
  o.max_area = static_cast<std::size_t>(c.image_width) * c.image_height / 4;
  return o;
}

inline Box blob_box(const Blob& b, const SyntheticConfig& c) {
  const double r = b.half_max_radius();
  return clip(Box{b.cx - r, b.cy - r, b.cx + r, b.cy + r}, c.image_width, c.image_height);
}

namespace detail {

struct Canvas {
  int width;
  int height;
  std::vector<double> px;
  double& at(int x, int y) { return px[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return px[static_cast<std::size_t>(y) * width + x]; }
};

inline Canvas render_canvas(std::span<const Blob> blobs, const SyntheticConfig& c,
                            double noise, Rng& rng) {
  Canvas cv{c.image_width, c.image_height,
            std::vector<double>(static_cast<std::size_t>(c.image_width) * c.image_height)};
  for (int y = 0; y < cv.height; ++y) {
    for (int x = 0; x < cv.width; ++x) {
      // Pixel centers sit at half-integer coordinates.
      const double px = x + 0.5;
      const double py = y + 0.5;
      double v = 0.0;
      for (const Blob& b : blobs) {
        const double d2 = (px - b.cx) * (px - b.cx) + (py - b.cy) * (py - b.cy);
        v += b.amplitude * std::exp(-d2 / (2.0 * b.sigma * b.sigma));
      }
      cv.at(x, y) = v + (noise > 0.0 ? normal(rng, 0.0, noise) : 0.0);
    }
  }
  return cv;
}

// Channels per cell: mean, max, above-floor coverage, and the above-floor
// weighted centroid offset from the cell center (x, y) in cell units.
inline void write_features(const Canvas& cv, const SyntheticConfig& c, FeatureGrid& grid,
                           int channel_offset) {
  const int cw = c.image_width / c.grid_w;
  const int ch = c.image_height / c.grid_h;
  for (int gy = 0; gy < c.grid_h; ++gy) {
    for (int gx = 0; gx < c.grid_w; ++gx) {
      double sum = 0.0;
      double mx = -std::numeric_limits<double>::infinity();
      double mass = 0.0;
      double mx_off = 0.0;
      double my_off = 0.0;
      int covered = 0;
      for (int y = gy * ch; y < (gy + 1) * ch; ++y) {
        for (int x = gx * cw; x < (gx + 1) * cw; ++x) {
          const double v = cv.at(x, y);
          sum += v;
          mx = std::max(mx, v);
          const double w = std::max(v - c.feature_floor, 0.0);
          if (w > 0.0) ++covered;
          mass += w;
          mx_off += w * ((x + 0.5) - (gx + 0.5) * cw) / cw;
          my_off += w * ((y + 0.5) - (gy + 0.5) * ch) / ch;
        }
      }
      const double n = static_cast<double>(cw) * ch;
      grid.at(gx, gy, channel_offset + 0) = static_cast<float>(sum / n);
      grid.at(gx, gy, channel_offset + 1) = static_cast<float>(mx);
      grid.at(gx, gy, channel_offset + 2) = static_cast<float>(covered / n);
      grid.at(gx, gy, channel_offset + 3) = static_cast<float>(mass > 0.0 ? mx_off / (mass + 0.5) : 0.0);
      grid.at(gx, gy, channel_offset + 4) = static_cast<float>(mass > 0.0 ? my_off / (mass + 0.5) : 0.0);
    }
  }
}

inline std::vector<double> gaussian_kernel(double sigma) {
  if (sigma <= 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += k[static_cast<std::size_t>(i + radius)];
  }
  for (double& v : k) v /= total;
  return k;
}

// Separable blur with zero padding.
inline std::vector<double> blur(const std::vector<double>& src, int w, int h, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(src.size(), 0.0);
  std::vector<double> out(src.size(), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) {
        const int xx = x + i;
        if (xx >= 0 && xx < w) s += k[static_cast<std::size_t>(i + r)] * src[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) {
        const int yy = y + i;
        if (yy >= 0 && yy < h) s += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = s;
    }
  }
  return out;
}

// Blurred indicator of each lesion's half-max disc, with per-lesion
// position jitter, gain and dropout, plus pixel noise.
inline Heatmap render_cam(std::span<const Blob> blobs, const SyntheticConfig& c, Rng& rng) {
  const int w = c.image_width;
  const int h = c.image_height;
  std::vector<double> indicator(static_cast<std::size_t>(w) * h, 0.0);
  for (const Blob& b : blobs) {
    const bool missed = uniform01(rng) < c.cam_miss_rate;
    const double jx = uniform(rng, -c.cam_jitter, c.cam_jitter);
    const double jy = uniform(rng, -c.cam_jitter, c.cam_jitter);
    const double gain = uniform(rng, c.cam_gain_min, c.cam_gain_max);
    if (missed) continue;
    const double r = b.half_max_radius();
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double dx = x + 0.5 - (b.cx + jx);
        const double dy = y + 0.5 - (b.cy + jy);
        if (dx * dx + dy * dy <= r * r) {
          auto& v = indicator[static_cast<std::size_t>(y) * w + x];
          v = std::max(v, gain);
        }
      }
    }
  }
  const auto smooth = blur(indicator, w, h, c.cam_blur_sigma);
  std::vector<float> values(smooth.size());
  for (std::size_t i = 0; i < smooth.size(); ++i) {
    const double noisy = smooth[i] + (c.cam_noise > 0.0 ? normal(rng, 0.0, c.cam_noise) : 0.0);
    values[i] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
  }
  return Heatmap(w, h, std::move(values));
}

}  // namespace detail

inline std::string synthetic_image_id(std::size_t index) {
  std::ostringstream os;
  os << "img_" << std::setw(5) << std::setfill('0') << index;
  return os.str();
}

// Draws blob geometry for one image; blobs keep min_gap between their
// half-max discs so CAM components stay separate.
inline std::vector<Blob> sample_blobs(const SyntheticConfig& c, Rng& rng) {
  const auto count = static_cast<int>(uniform_int(rng, c.min_blobs, c.max_blobs));
  std::vector<Blob> blobs;
  for (int i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      Blob b;
      b.sigma = uniform(rng, c.sigma_min, c.sigma_max);
      b.amplitude = uniform(rng, c.amplitude_min, c.amplitude_max);
      const double r = b.half_max_radius();
      b.cx = uniform(rng, r, c.image_width - r);
      b.cy = uniform(rng, r, c.image_height - r);
      const bool clear = std::all_of(blobs.begin(), blobs.end(), [&](const Blob& o) {
        const double gap = std::hypot(b.cx - o.cx, b.cy - o.cy) - r - o.half_max_radius();
        return gap >= c.min_gap;
      });
      if (clear) {
        blobs.push_back(b);
        break;
      }
    }
  }
  return blobs;
}

// Renders one fully annotated record from explicit blobs.
inline AnnotationRecord render_synthetic_image(std::string image_id, std::span<const Blob> blobs,
                                               const SyntheticConfig& c, std::uint64_t seed) {
  validate(c);
  Rng rng(seed);
  AnnotationRecord rec;
  rec.image_id = std::move(image_id);
  rec.kind = AnnotationKind::kFull;
  for (const Blob& b : blobs) rec.boxes.push_back(blob_box(b, c));
  rec.image_class = blobs.empty() ? 0 : 1;
  // Stand-in for the image-level classifier's confidence in its label.
  rec.classifier_score = rec.image_class == 1 ? uniform(rng, 0.6, 1.0) : uniform(rng, 0.0, 0.4);

  rec.features = FeatureGrid(c.grid_w, c.grid_h, c.feature_dim());
  const auto main_view = detail::render_canvas(blobs, c, c.pixel_noise, rng);
  detail::write_features(main_view, c, rec.features, 0);

  std::vector<Blob> aux(blobs.begin(), blobs.end());
  for (Blob& b : aux) {
    b.cx += uniform(rng, -c.aux_jitter, c.aux_jitter);
    b.cy += uniform(rng, -c.aux_jitter, c.aux_jitter);
  }
  const auto aux_view = detail::render_canvas(aux, c, c.pixel_noise, rng);
  detail::write_features(aux_view, c, rec.features, c.channels_per_view());

  rec.heatmap = detail::render_cam(blobs, c, rng);
  return rec;
}

struct SyntheticImage {
  AnnotationRecord record;
  std::vector<Blob> blobs;
};

// n_images fully annotated records. Image i depends only on (seed, i).
inline std::vector<SyntheticImage> generate_synthetic_with_blobs(std::size_t n_images,
                                                                 std::uint64_t seed,
                                                                 const SyntheticConfig& c,
                                                                 std::size_t first_index = 0) {
  require(n_images > 0, "n_images must be positive");
  validate(c);
  std::vector<SyntheticImage> out;
  out.reserve(n_images);
  for (std::size_t i = first_index; i < first_index + n_images; ++i) {
    Rng rng(mix_seed(seed, 2 * i));
    std::vector<Blob> blobs = sample_blobs(c, rng);
    AnnotationRecord rec =
        render_synthetic_image(synthetic_image_id(i), blobs, c, mix_seed(seed, 2 * i + 1));
    out.push_back({std::move(rec), std::move(blobs)});
  }
  return out;
}

inline std::vector<AnnotationRecord> generate_synthetic(std::size_t n_images, std::uint64_t seed,
                                                        const SyntheticConfig& c,
                                                        std::size_t first_index = 0) {
  std::vector<AnnotationRecord> out;
  for (auto& img : generate_synthetic_with_blobs(n_images, seed, c, first_index)) {
    out.push_back(std::move(img.record));
  }
  return out;
}

// Demotes a record to an image-level label: class 1 iff it had any box.
inline AnnotationRecord strip_to_weak(AnnotationRecord r) {
  r.image_class = r.boxes.empty() ? 0 : 1;
  r.boxes.clear();
  r.kind = AnnotationKind::kWeak;
  return r;
}

// Keeps floor(ratio * N) uniformly sampled records fully annotated and
// demotes the rest. Both lists preserve input order.
inline SplitDataset split_partial(std::span<const AnnotationRecord> records, double ratio,
                                  std::uint64_t seed) {
  require(!records.empty(), "cannot split an empty record list");
  require(ratio > 0.0 && ratio <= 1.0, "split ratio must lie in (0, 1]");
  std::unordered_set<std::string> seen;
  for (const auto& r : records) {
    require(r.is_full(), r.image_id + ": split input must be fully annotated");
    require(seen.insert(r.image_id).second, "duplicate image_id " + r.image_id);
  }
  const std::size_t n = records.size();
  // The small epsilon keeps ratios like 3/4 or 1/3 from losing a record to
  // rounding.
  const auto keep = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  shuffle(std::span<std::size_t>(order), rng);
  std::vector<bool> kept(n, false);
  for (std::size_t i = 0; i < keep; ++i) kept[order[i]] = true;

  SplitDataset out;
  out.protocol.ratio = ratio;
  for (std::size_t i = 0; i < n; ++i) {
    if (kept[i]) {
      out.fully.push_back(records[i]);
    } else {
      out.weakly.push_back(strip_to_weak(records[i]));
    }
  }
  return out;
}

// Fully labelled protocol: everything keeps its boxes.
inline SplitDataset split_full(std::span<const AnnotationRecord> records) {
  return split_partial(records, 1.0, 0);
}

}  // namespace wsdet
