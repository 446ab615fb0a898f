#pragma once

// Reference implementations used only by tests. Each one is written from
// the definition, deliberately not sharing code paths with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <set>
#include <vector>

#include "wsdet/detection.hpp"
#include "wsdet/geometry.hpp"
#include "wsdet/metrics.hpp"
#include "wsdet/random.hpp"

namespace wsdet::oracle {

// Pixel count of the overlap of two integer-cornered boxes, by painting
// both onto a lattice.
inline int rasterized_intersection(const Box& a, const Box& b, int lattice = 64) {
  int count = 0;
  for (int y = 0; y < lattice; ++y) {
    for (int x = 0; x < lattice; ++x) {
      const bool in_a = x >= a.x0 && x < a.x1 && y >= a.y0 && y < a.y1;
      const bool in_b = x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
      if (in_a && in_b) ++count;
    }
  }
  return count;
}

// Binary grid as rows of 0/1.
using BinaryGrid = std::vector<std::vector<int>>;
using PixelSet = std::set<std::pair<int, int>>;  // (x, y)

// Recursive flood fill; returns the components as a set of pixel sets so
// the comparison ignores ordering.
inline std::set<PixelSet> flood_fill_components(const BinaryGrid& grid, int connectivity) {
  const int h = static_cast<int>(grid.size());
  const int w = h ? static_cast<int>(grid[0].size()) : 0;
  std::vector<std::vector<bool>> visited(h, std::vector<bool>(w, false));
  std::set<PixelSet> out;
  std::function<void(int, int, PixelSet&)> fill = [&](int x, int y, PixelSet& comp) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    if (visited[y][x] || grid[y][x] == 0) return;
    visited[y][x] = true;
    comp.insert({x, y});
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        if (dx == 0 && dy == 0) continue;
        if (connectivity == 4 && dx != 0 && dy != 0) continue;
        fill(x + dx, y + dy, comp);
      }
    }
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (grid[y][x] != 0 && !visited[y][x]) {
        PixelSet comp;
        fill(x, y, comp);
        out.insert(std::move(comp));
      }
    }
  }
  return out;
}

// O(n^2) NMS: walk detections best-first (score desc, index asc) and keep
// one iff no already-kept detection overlaps it at IoU >= tau.
inline std::vector<Detection> brute_force_nms(const std::vector<Detection>& dets, double tau) {
  std::vector<std::size_t> idx(dets.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  // Selection-sort style ordering to avoid relying on stable_sort.
  std::vector<std::size_t> order;
  std::vector<bool> used(dets.size(), false);
  for (std::size_t round = 0; round < dets.size(); ++round) {
    std::size_t best = dets.size();
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (used[i]) continue;
      if (best == dets.size() || dets[i].score > dets[best].score) best = i;
    }
    used[best] = true;
    order.push_back(best);
  }
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (iou(k.box, dets[i].box) >= tau) suppressed = true;
    }
    if (!suppressed) kept.push_back(dets[i]);
  }
  return kept;
}

// AP by enumerating score thresholds: for each distinct score t, re-run
// matching from scratch on the detections with score >= t, record
// (recall, precision), then integrate the precision envelope over recall.
inline double threshold_enumeration_ap(const EvalSet& eval, double iou_thresh) {
  std::set<double, std::greater<>> thresholds;
  std::size_t total_gt = 0;
  for (const auto& [id, img] : eval) {
    total_gt += img.ground_truth.size();
    for (const auto& d : img.detections) thresholds.insert(d.score);
  }
  struct Pt {
    double recall, precision;
  };
  std::vector<Pt> pts;
  for (double t : thresholds) {
    std::size_t tp = 0, n = 0;
    for (const auto& [id, img] : eval) {
      std::vector<Detection> subset;
      for (const auto& d : img.detections) {
        if (d.score >= t) subset.push_back(d);
      }
      std::stable_sort(subset.begin(), subset.end(),
                [](const Detection& a, const Detection& b) { return a.score > b.score; });
      std::vector<bool> taken(img.ground_truth.size(), false);
      for (const auto& d : subset) {
        ++n;
        int best = -1;
        double best_iou = -1.0;
        for (std::size_t g = 0; g < img.ground_truth.size(); ++g) {
          const double o = iou(d.box, img.ground_truth[g]);
          if (!taken[g] && o >= iou_thresh && o > best_iou) {
            best_iou = o;
            best = static_cast<int>(g);
          }
        }
        if (best >= 0) {
          taken[static_cast<std::size_t>(best)] = true;
          ++tp;
        }
      }
    }
    pts.push_back({static_cast<double>(tp) / total_gt, static_cast<double>(tp) / n});
  }
  // Envelope at recall r: max precision over points with recall >= r.
  // Integrate the step function over the distinct recall levels.
  std::set<double> levels;
  for (const auto& p : pts) levels.insert(p.recall);
  double ap = 0.0;
  double prev = 0.0;
  for (double r : levels) {
    double env = 0.0;
    for (const auto& p : pts) {
      if (p.recall >= r) env = std::max(env, p.precision);
    }
    ap += (r - prev) * env;
    prev = r;
  }
  return ap;
}

// Central finite-difference gradient of f at x.
inline std::vector<double> finite_difference(const std::function<double(const std::vector<double>&)>& f,
                                             std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Largest |a - n| / max(|a|, |n|, floor) over all components.
inline double max_relative_error(const std::vector<double>& analytic,
                                 const std::vector<double>& numeric, double floor = 1e-4) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

// Random valid box with integer corners inside [0, extent).
inline Box random_int_box(Rng& rng, int extent) {
  const auto x0 = static_cast<double>(uniform_int(rng, 0, extent - 2));
  const auto y0 = static_cast<double>(uniform_int(rng, 0, extent - 2));
  const auto x1 = static_cast<double>(uniform_int(rng, static_cast<std::int64_t>(x0) + 1, extent));
  const auto y1 = static_cast<double>(uniform_int(rng, static_cast<std::int64_t>(y0) + 1, extent));
  return Box{x0, y0, x1, y1};
}

// Random continuous box inside [0, extent).
inline Box random_box(Rng& rng, double extent) {
  const double x0 = uniform(rng, 0.0, extent * 0.8);
  const double y0 = uniform(rng, 0.0, extent * 0.8);
  const double w = uniform(rng, 1.0, extent * 0.4);
  const double h = uniform(rng, 1.0, extent * 0.4);
  return Box{x0, y0, x0 + w, y0 + h};
}

}  // namespace wsdet::oracle
