#pragma once

// Single-class detection metrics: greedy IoU matching, average precision
// over the all-points precision envelope, and FROC / recall at a
// false-positives-per-image budget.

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "wsdet/detection.hpp"
#include "wsdet/error.hpp"
#include "wsdet/geometry.hpp"

namespace wsdet {

inline constexpr double kDefaultMatchIou = 0.2;
inline constexpr double kDefaultTargetFppi = 0.5;

struct ImageEval {
  std::vector<Box> ground_truth;
  std::vector<Detection> detections;
};

// Keyed by image id; std::map fixes the accumulation order.
using EvalSet = std::map<std::string, ImageEval>;

struct FrocPoint {
  double fppi = 0.0;
  double recall = 0.0;
  friend bool operator==(const FrocPoint&, const FrocPoint&) = default;
};

using FrocCurve = std::vector<FrocPoint>;

// Per-detection TP flags in the caller's order. Detections are processed by
// descending score (ties in input order); each one claims the unmatched
// ground truth it overlaps most, provided IoU >= iou_thresh.
inline std::vector<bool> match_detections(std::span<const Box> gts,
                                          std::span<const Detection> dets,
                                          double iou_thresh = kDefaultMatchIou) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });
  std::vector<bool> gt_used(gts.size(), false);
  std::vector<bool> tp(dets.size(), false);
  for (std::size_t d : order) {
    double best = -1.0;
    std::size_t best_gt = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[g]) continue;
      const double o = iou(dets[d].box, gts[g]);
      if (o >= iou_thresh && o > best) {
        best = o;
        best_gt = g;
      }
    }
    if (best_gt < gts.size()) {
      gt_used[best_gt] = true;
      tp[d] = true;
    }
  }
  return tp;
}

namespace detail {

struct ScoredFlag {
  double score;
  bool tp;
};

struct PooledMatches {
  std::vector<ScoredFlag> flags;  // descending score, ties in image/input order
  std::size_t total_gt = 0;
  std::size_t images = 0;
};

inline PooledMatches pool_matches(const EvalSet& eval, double iou_thresh) {
  PooledMatches out;
  out.images = eval.size();
  for (const auto& [id, img] : eval) {
    for (const Detection& d : img.detections) {
      require(d.score >= 0.0 && d.score <= 1.0,
              "detection score out of [0, 1] in image " + id);
    }
    out.total_gt += img.ground_truth.size();
    const std::vector<bool> tp =
        match_detections(img.ground_truth, img.detections, iou_thresh);
    for (std::size_t i = 0; i < tp.size(); ++i) {
      out.flags.push_back({img.detections[i].score, tp[i]});
    }
  }
  std::stable_sort(out.flags.begin(), out.flags.end(),
                   [](const ScoredFlag& a, const ScoredFlag& b) { return a.score > b.score; });
  return out;
}

}  // namespace detail

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

// Precision/recall at every distinct score threshold, in descending score
// order. Detections sharing a score enter together.
inline std::vector<PrPoint> precision_recall_curve(const EvalSet& eval,
                                                   double iou_thresh = kDefaultMatchIou) {
  const auto pooled = detail::pool_matches(eval, iou_thresh);
  if (pooled.total_gt == 0) throw Error("evaluation set has no ground-truth boxes");
  std::vector<PrPoint> curve;
  std::size_t tp = 0;
  const auto& flags = pooled.flags;
  for (std::size_t i = 0; i < flags.size();) {
    const double score = flags[i].score;
    for (; i < flags.size() && flags[i].score == score; ++i) {
      if (flags[i].tp) ++tp;
    }
    curve.push_back({static_cast<double>(tp) / static_cast<double>(pooled.total_gt),
                     static_cast<double>(tp) / static_cast<double>(i)});
  }
  return curve;
}

// Detections are pooled across images (single class, so mAP == AP).
inline double mean_average_precision(const EvalSet& eval,
                                     double iou_thresh = kDefaultMatchIou) {
  std::vector<PrPoint> curve = precision_recall_curve(eval, iou_thresh);
  for (std::size_t i = curve.size(); i > 1; --i) {
    curve[i - 2].precision = std::max(curve[i - 2].precision, curve[i - 1].precision);
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (const PrPoint& p : curve) {
    ap += (p.recall - prev_recall) * p.precision;
    prev_recall = p.recall;
  }
  return ap;
}

// Sweeps the score threshold over every distinct score (>= semantics) and
// keeps, per FPPI value, the highest recall reached.
inline FrocCurve froc(const EvalSet& eval, double iou_thresh = kDefaultMatchIou) {
  const auto pooled = detail::pool_matches(eval, iou_thresh);
  require(pooled.images > 0, "evaluation set has no images");
  if (pooled.total_gt == 0) throw Error("evaluation set has no ground-truth boxes");
  const auto images = static_cast<double>(pooled.images);
  const auto total = static_cast<double>(pooled.total_gt);

  FrocCurve curve;
  std::size_t tp = 0;
  std::size_t fp = 0;
  const auto& flags = pooled.flags;
  for (std::size_t i = 0; i < flags.size();) {
    const double score = flags[i].score;
    for (; i < flags.size() && flags[i].score == score; ++i) {
      if (flags[i].tp) {
        ++tp;
      } else {
        ++fp;
      }
    }
    const FrocPoint p{static_cast<double>(fp) / images, static_cast<double>(tp) / total};
    if (!curve.empty() && curve.back().fppi == p.fppi) {
      curve.back().recall = p.recall;
    } else {
      curve.push_back(p);
    }
  }
  if (curve.empty()) curve.push_back({0.0, 0.0});
  return curve;
}

// Step-function reading: recall of the largest-FPPI point within budget.
inline double recall_at_fppi(const FrocCurve& curve,
                             double target_fppi = kDefaultTargetFppi) {
  require(target_fppi >= 0.0, "target FPPI must be non-negative");
  double recall = 0.0;
  for (const FrocPoint& p : curve) {
    if (p.fppi <= target_fppi) recall = std::max(recall, p.recall);
  }
  return recall;
}

}  // namespace wsdet
