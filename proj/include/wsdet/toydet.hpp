#pragma once

// A small differentiable grid detector. The image is a grid of feature
// cells; every cell owns a linear classification head and a linear
// four-output box-regression head over its normalized features. Box
// regression uses the usual anchor parameterization (dx, dy, dw, dh) with
// the cell extent as the anchor.
//
// The loss keeps the two-stage detector shape: an "rpn" (cls, reg) pair and
// an "roi" (cls, reg) pair. Both pairs read the same head; they differ only
// in how cells are assigned to targets (the rpn pair also promotes the best
// anchor of every target, the roi pair does not).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "wsdet/detection.hpp"
#include "wsdet/ema.hpp"
#include "wsdet/error.hpp"
#include "wsdet/feature_grid.hpp"
#include "wsdet/fusion.hpp"
#include "wsdet/geometry.hpp"

namespace wsdet {

inline constexpr double kDefaultScoreThreshold = 0.5;
inline constexpr double kDefaultWeakLossWeight = 0.25;

struct DetectorConfig {
  int grid_w = 8;
  int grid_h = 8;
  int feature_dim = 10;
  double cell_w = 8.0;  // pixels per cell
  double cell_h = 8.0;
  double score_threshold = kDefaultScoreThreshold;
  double tau_nms = kDefaultNmsThreshold;
  double rpn_match_iou = 0.2;
  double roi_match_iou = 0.2;
  double smooth_l1_beta = 1.0;
  double norm_eps = 1e-5;

  std::size_t cells() const { return static_cast<std::size_t>(grid_w) * grid_h; }
  std::size_t params_per_cell() const { return 5 * static_cast<std::size_t>(feature_dim); }
  std::size_t theta_size() const { return cells() * params_per_cell(); }
  double image_width() const { return grid_w * cell_w; }
  double image_height() const { return grid_h * cell_h; }
};

inline void validate(const DetectorConfig& c) {
  require(c.grid_w > 0 && c.grid_h > 0, "detector grid must be non-empty");
  require(c.feature_dim > 0, "feature_dim must be positive");
  require(c.cell_w > 0.0 && c.cell_h > 0.0, "cell size must be positive");
  require(c.score_threshold >= 0.0 && c.score_threshold <= 1.0,
          "score_threshold must lie in [0, 1]");
  require(c.tau_nms >= 0.0 && c.tau_nms <= 1.0, "tau_nms must lie in [0, 1]");
  require(c.rpn_match_iou > 0.0 && c.rpn_match_iou <= 1.0 && c.roi_match_iou > 0.0 &&
              c.roi_match_iou <= 1.0,
          "match IoU thresholds must lie in (0, 1]");
  require(c.smooth_l1_beta > 0.0, "smooth_l1_beta must be positive");
  require(c.norm_eps > 0.0, "norm_eps must be positive");
}

struct GridDetector {
  DetectorConfig config;
  ParameterState params;
};

// Zero theta, identity normalization.
inline GridDetector make_detector(const DetectorConfig& config) {
  validate(config);
  GridDetector det{config, {}};
  det.params.theta.assign(config.theta_size(), 0.0);
  det.params.norm_mean.assign(static_cast<std::size_t>(config.feature_dim), 0.0);
  det.params.norm_var.assign(static_cast<std::size_t>(config.feature_dim), 1.0);
  return det;
}

inline void validate(const GridDetector& det) {
  validate(det.config);
  validate(det.params);
  require(det.params.theta.size() == det.config.theta_size(),
          "theta length does not match grid_w * grid_h * 5 * feature_dim");
  require(det.params.norm_mean.size() == static_cast<std::size_t>(det.config.feature_dim),
          "normalization statistics must have feature_dim channels");
}

struct LossBreakdown {
  double cls_rpn = 0.0;
  double reg_rpn = 0.0;
  double cls_roi = 0.0;
  double reg_roi = 0.0;

  double total() const { return cls_rpn + reg_rpn + cls_roi + reg_roi; }

  LossBreakdown& operator+=(const LossBreakdown& o) {
    cls_rpn += o.cls_rpn;
    reg_rpn += o.reg_rpn;
    cls_roi += o.cls_roi;
    reg_roi += o.reg_roi;
    return *this;
  }

  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

// Theta layout, per cell: [cls weights (D)] [reg weights, 4 rows of D].
inline std::size_t cls_offset(const DetectorConfig& c, std::size_t cell) {
  return cell * c.params_per_cell();
}
inline std::size_t reg_offset(const DetectorConfig& c, std::size_t cell, int k) {
  return cell * c.params_per_cell() + static_cast<std::size_t>(c.feature_dim) * (1 + k);
}

inline Box anchor(const DetectorConfig& c, std::size_t cell) {
  const auto gx = static_cast<double>(cell % static_cast<std::size_t>(c.grid_w));
  const auto gy = static_cast<double>(cell / static_cast<std::size_t>(c.grid_w));
  return Box{gx * c.cell_w, gy * c.cell_h, (gx + 1.0) * c.cell_w, (gy + 1.0) * c.cell_h};
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double smooth_l1(double d, double beta) {
  const double a = std::abs(d);
  return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
}

inline double smooth_l1_grad(double d, double beta) {
  if (std::abs(d) < beta) return d / beta;
  return d > 0.0 ? 1.0 : -1.0;
}

// Box encoding relative to an anchor.
struct BoxDelta {
  double dx = 0.0, dy = 0.0, dw = 0.0, dh = 0.0;
  double operator[](int k) const { return k == 0 ? dx : k == 1 ? dy : k == 2 ? dw : dh; }
};

inline BoxDelta encode(const Box& anchor_box, const Box& target) {
  return {(target.center_x() - anchor_box.center_x()) / anchor_box.width(),
          (target.center_y() - anchor_box.center_y()) / anchor_box.height(),
          std::log(target.width() / anchor_box.width()),
          std::log(target.height() / anchor_box.height())};
}

// Inverse of encode; scale deltas are clamped so exp() stays finite.
inline Box decode(const Box& anchor_box, const BoxDelta& d) {
  const double clip = std::log(1000.0 / 16.0);
  const double cx = anchor_box.center_x() + d.dx * anchor_box.width();
  const double cy = anchor_box.center_y() + d.dy * anchor_box.height();
  const double w = anchor_box.width() * std::exp(std::min(d.dw, clip));
  const double h = anchor_box.height() * std::exp(std::min(d.dh, clip));
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

namespace detail {

inline void check_image(const DetectorConfig& c, const FeatureGrid& image) {
  if (image.width != c.grid_w || image.height != c.grid_h || image.channels != c.feature_dim) {
    throw InvalidArgument("feature grid is " + std::to_string(image.width) + "x" +
                          std::to_string(image.height) + "x" + std::to_string(image.channels) +
                          ", detector expects " + std::to_string(c.grid_w) + "x" +
                          std::to_string(c.grid_h) + "x" + std::to_string(c.feature_dim));
  }
}

// Normalized features for one cell.
inline void normalize_cell(const GridDetector& det, std::span<const float> raw,
                           std::span<double> out) {
  for (std::size_t k = 0; k < raw.size(); ++k) {
    out[k] = (static_cast<double>(raw[k]) - det.params.norm_mean[k]) /
             std::sqrt(det.params.norm_var[k] + det.config.norm_eps);
  }
}

inline double dot(std::span<const double> w, std::span<const double> z) {
  double s = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) s += w[k] * z[k];
  return s;
}

struct CellOutput {
  double logit = 0.0;
  BoxDelta delta;
};

inline CellOutput forward_cell(const GridDetector& det, std::size_t cell,
                               std::span<const double> z) {
  const auto& c = det.config;
  const std::span<const double> theta(det.params.theta);
  const auto d = static_cast<std::size_t>(c.feature_dim);
  CellOutput out;
  out.logit = dot(theta.subspan(cls_offset(c, cell), d), z);
  out.delta = {dot(theta.subspan(reg_offset(c, cell, 0), d), z),
               dot(theta.subspan(reg_offset(c, cell, 1), d), z),
               dot(theta.subspan(reg_offset(c, cell, 2), d), z),
               dot(theta.subspan(reg_offset(c, cell, 3), d), z)};
  return out;
}

// For each cell, the index of the label it regresses to, or -1 for a
// negative cell.
inline std::vector<int> assign_cells(const DetectorConfig& c, std::span<const Detection> labels,
                                     double match_iou, bool promote_best_anchor) {
  const std::size_t cells = c.cells();
  std::vector<int> assigned(cells, -1);
  std::vector<double> best_iou(cells, 0.0);
  for (std::size_t cell = 0; cell < cells; ++cell) {
    const Box a = anchor(c, cell);
    for (std::size_t l = 0; l < labels.size(); ++l) {
      const double o = iou(a, labels[l].box);
      if (o > best_iou[cell]) {
        best_iou[cell] = o;
        if (o >= match_iou) assigned[cell] = static_cast<int>(l);
      }
    }
  }
  if (promote_best_anchor) {
    for (std::size_t l = 0; l < labels.size(); ++l) {
      double best = 0.0;
      for (std::size_t cell = 0; cell < cells; ++cell) {
        best = std::max(best, iou(anchor(c, cell), labels[l].box));
      }
      if (best <= 0.0) continue;
      for (std::size_t cell = 0; cell < cells; ++cell) {
        if (iou(anchor(c, cell), labels[l].box) == best) assigned[cell] = static_cast<int>(l);
      }
    }
  }
  return assigned;
}

// Accumulates the loss of one image and, when grad is non-empty, weight
// times its gradient with respect to theta.
inline LossBreakdown loss_and_gradient(const GridDetector& det, const FeatureGrid& image,
                                       std::span<const Detection> labels, double weight,
                                       std::span<double> grad) {
  const auto& c = det.config;
  check_image(c, image);
  for (const Detection& l : labels) require(is_valid(l.box), "invalid label box");

  const std::vector<int> rpn = assign_cells(c, labels, c.rpn_match_iou, true);
  const std::vector<int> roi = assign_cells(c, labels, c.roi_match_iou, false);
  const auto d = static_cast<std::size_t>(c.feature_dim);
  std::vector<double> z(d);
  LossBreakdown loss;

  for (std::size_t cell = 0; cell < c.cells(); ++cell) {
    normalize_cell(det, image.cell(cell), z);
    const CellOutput out = forward_cell(det, cell, z);
    const Box a = anchor(c, cell);

    double dlogit = 0.0;
    double ddelta[4] = {0.0, 0.0, 0.0, 0.0};
    auto slot = [&](int target, double& cls, double& reg) {
      const double y = target >= 0 ? 1.0 : 0.0;
      cls += softplus(out.logit) - y * out.logit;
      dlogit += sigmoid(out.logit) - y;
      if (target < 0) return;
      const BoxDelta t = encode(a, labels[static_cast<std::size_t>(target)].box);
      for (int k = 0; k < 4; ++k) {
        const double diff = out.delta[k] - t[k];
        reg += smooth_l1(diff, c.smooth_l1_beta);
        ddelta[k] += smooth_l1_grad(diff, c.smooth_l1_beta);
      }
    };
    slot(rpn[cell], loss.cls_rpn, loss.reg_rpn);
    slot(roi[cell], loss.cls_roi, loss.reg_roi);

    if (grad.empty()) continue;
    for (std::size_t k = 0; k < d; ++k) {
      grad[cls_offset(c, cell) + k] += weight * dlogit * z[k];
    }
    for (int r = 0; r < 4; ++r) {
      if (ddelta[r] == 0.0) continue;
      for (std::size_t k = 0; k < d; ++k) {
        grad[reg_offset(c, cell, r) + k] += weight * ddelta[r] * z[k];
      }
    }
  }
  return loss;
}

}  // namespace detail

// Per-cell sigmoid scores in cell order.
inline std::vector<double> cell_scores(const GridDetector& det, const FeatureGrid& image) {
  detail::check_image(det.config, image);
  std::vector<double> z(static_cast<std::size_t>(det.config.feature_dim));
  std::vector<double> scores(det.config.cells());
  for (std::size_t cell = 0; cell < scores.size(); ++cell) {
    detail::normalize_cell(det, image.cell(cell), z);
    scores[cell] = sigmoid(detail::forward_cell(det, cell, z).logit);
  }
  return scores;
}

// Cells scoring strictly above score_threshold emit their decoded box
// (clipped to the image); the result goes through NMS.
inline std::vector<Detection> predict(const GridDetector& det, const FeatureGrid& image,
                                      double score_threshold) {
  const auto& c = det.config;
  detail::check_image(c, image);
  std::vector<double> z(static_cast<std::size_t>(c.feature_dim));
  std::vector<Detection> raw;
  for (std::size_t cell = 0; cell < c.cells(); ++cell) {
    detail::normalize_cell(det, image.cell(cell), z);
    const auto out = detail::forward_cell(det, cell, z);
    const double score = sigmoid(out.logit);
    if (!(score > score_threshold)) continue;
    const Box b = clip(decode(anchor(c, cell), out.delta), c.image_width(), c.image_height());
    if (!is_valid(b)) continue;
    raw.push_back(Detection{score, b, Source::kTeacher});
  }
  return nms(raw, c.tau_nms);
}

inline std::vector<Detection> predict(const GridDetector& det, const FeatureGrid& image) {
  return predict(det, image, det.config.score_threshold);
}

inline LossBreakdown supervised_loss(const GridDetector& det, const FeatureGrid& image,
                                     std::span<const Detection> labels) {
  return detail::loss_and_gradient(det, image, labels, 1.0, {});
}

// Same terms as the supervised loss, with pseudo-labels as targets.
inline LossBreakdown weak_loss(const GridDetector& det, const FeatureGrid& image,
                               std::span<const Detection> pseudo) {
  return supervised_loss(det, image, pseudo);
}

struct TrainingSample {
  std::reference_wrapper<const FeatureGrid> features;
  std::vector<Detection> labels;
};

struct StepResult {
  LossBreakdown supervised;
  LossBreakdown weak;
  double total = 0.0;  // supervised + lambda * weak
};

// Sum over the batch of supervised and weak losses, and the gradient of
// sup + lambda * weak written into grad (overwritten, sized to theta).
inline StepResult student_objective(const GridDetector& student,
                                    std::span<const TrainingSample> batch_s,
                                    std::span<const TrainingSample> batch_w, double lambda,
                                    std::vector<double>& grad) {
  require(lambda >= 0.0, "lambda must be non-negative");
  validate(student);
  grad.assign(student.params.theta.size(), 0.0);
  StepResult r;
  for (const TrainingSample& s : batch_s) {
    r.supervised += detail::loss_and_gradient(student, s.features, s.labels, 1.0, grad);
  }
  if (!batch_w.empty()) {
    std::vector<double> weak_grad(grad.size(), 0.0);
    for (const TrainingSample& s : batch_w) {
      r.weak += detail::loss_and_gradient(student, s.features, s.labels, 1.0, weak_grad);
    }
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += lambda * weak_grad[i];
  }
  r.total = r.supervised.total() + lambda * r.weak.total();
  return r;
}

// One plain gradient-descent step on sup(batch_s) + lambda * weak(batch_w).
inline GridDetector student_step(const GridDetector& student,
                                 std::span<const TrainingSample> batch_s,
                                 std::span<const TrainingSample> batch_w, double lambda,
                                 double lr, StepResult* result = nullptr) {
  require(lr > 0.0 && std::isfinite(lr), "learning rate must be positive and finite");
  std::vector<double> grad;
  const StepResult r = student_objective(student, batch_s, batch_w, lambda, grad);
  if (!std::isfinite(r.total)) {
    throw Error("non-finite student loss (supervised " + std::to_string(r.supervised.total()) +
                ", weak " + std::to_string(r.weak.total()) + "); step aborted");
  }
  GridDetector next = student;
  for (std::size_t i = 0; i < grad.size(); ++i) next.params.theta[i] -= lr * grad[i];
  if (result != nullptr) *result = r;
  return next;
}

}  // namespace wsdet
