#pragma once

// Greedy non-maximum suppression and the teacher + CAM pseudo-label fusion
// rule used while the teacher is still unreliable.

#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "wsdet/detection.hpp"
#include "wsdet/error.hpp"
#include "wsdet/geometry.hpp"

namespace wsdet {

inline constexpr double kDefaultNmsThreshold = 0.2;
inline constexpr int kDefaultCamEpochs = 2;

// Repeatedly keeps the highest-scoring remaining detection and removes every
// remaining detection with IoU >= tau_nms against it. Equal scores pop in
// input order. Output is in descending score order.
inline std::vector<Detection> nms(std::span<const Detection> dets,
                                  double tau_nms = kDefaultNmsThreshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });

  std::vector<bool> removed(dets.size(), false);
  std::vector<Detection> kept;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t top = order[i];
    if (removed[top]) continue;
    kept.push_back(dets[top]);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t other = order[j];
      if (!removed[other] && iou(dets[top].box, dets[other].box) >= tau_nms) {
        removed[other] = true;
      }
    }
  }
  return kept;
}

// Most confident detection; the first one wins on ties.
inline const Detection& top_detection(std::span<const Detection> dets) {
  if (dets.empty()) throw Error("teacher produced no detections");
  std::size_t best = 0;
  for (std::size_t i = 1; i < dets.size(); ++i) {
    if (dets[i].score > dets[best].score) best = i;
  }
  return dets[best];
}

struct FusionOptions {
  double tau_nms = kDefaultNmsThreshold;
  int cam_epochs = kDefaultCamEpochs;
};

// During the first cam_epochs epochs the pseudo-labels are NMS over the CAM
// boxes plus the teacher's single most confident box (CAM-only when the
// teacher is silent). Afterwards the teacher's detections pass through
// untouched.
inline std::vector<Detection> fuse_pseudo_labels(std::span<const Detection> teacher,
                                                 std::span<const Detection> cam,
                                                 int epoch,
                                                 const FusionOptions& opts = {}) {
  require(opts.tau_nms >= 0.0 && opts.tau_nms <= 1.0,
          "tau_nms must lie in [0, 1]");
  require(epoch >= 0, "epoch must be non-negative");
  if (epoch >= opts.cam_epochs) {
    return {teacher.begin(), teacher.end()};
  }
  std::vector<Detection> pool(cam.begin(), cam.end());
  if (!teacher.empty()) pool.push_back(top_detection(teacher));
  return nms(pool, opts.tau_nms);
}

}  // namespace wsdet
