#pragma once

// The student-teacher loop. Each step draws one batch from the fully
// annotated subset and one from the weakly annotated subset, asks the
// teacher for pseudo-labels on the weak batch (fused with CAM boxes during
// the first cam_epochs epochs), takes a gradient step on
// sup + lambda * weak for the student, applies the normalization strategy
// and EMA-updates the teacher. Evaluation always uses the teacher.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wsdet/dataset.hpp"
#include "wsdet/ema.hpp"
#include "wsdet/error.hpp"
#include "wsdet/fusion.hpp"
#include "wsdet/heatmap.hpp"
#include "wsdet/metrics.hpp"
#include "wsdet/random.hpp"
#include "wsdet/toydet.hpp"

namespace wsdet {

enum class EmaSchedule { kPerIteration, kPerEpoch };

struct TrainConfig {
  int epochs = 20;
  double lambda = kDefaultWeakLossWeight;
  double alpha = kDefaultEmaAlpha;
  double tau_nms = kDefaultNmsThreshold;
  int cam_epochs = kDefaultCamEpochs;
  NormStrategy norm = FrozenNorm{};
  EmaSchedule ema_schedule = EmaSchedule::kPerIteration;
  double lr = 0.005;
  int batch_size = 4;
  std::uint64_t seed = 0;
  double init_scale = 0.0;  // stddev of the initial theta
  double score_threshold = kDefaultScoreThreshold;
  double eval_score_threshold = 0.05;
  double match_iou = 0.2;
  double eval_iou = kDefaultMatchIou;
  double target_fppi = kDefaultTargetFppi;
  double cam_tau = kDefaultCamThreshold;
  std::size_t cam_min_area = 4;
  std::size_t cam_max_area = 1024;
  Connectivity cam_connectivity = Connectivity::kEight;

  // Synthetic benchmark used by the train-sim command.
  SyntheticConfig synthetic;
  std::size_t n_train = 200;
  std::size_t n_test = 100;
  double split_ratio = 0.25;
};

// Every violated constraint, one message per field; empty when valid.
inline std::vector<std::string> validation_errors(const TrainConfig& c) {
  std::vector<std::string> errs;
  auto check = [&](bool ok, const char* msg) {
    if (!ok) errs.emplace_back(msg);
  };
  check(c.epochs >= 0, "epochs: must be >= 0");
  check(c.lambda >= 0.0 && std::isfinite(c.lambda), "lambda: must be finite and >= 0");
  check(c.alpha > 0.0 && c.alpha < 1.0, "alpha: must lie in (0, 1)");
  check(c.tau_nms >= 0.0 && c.tau_nms <= 1.0, "tau_nms: must lie in [0, 1]");
  check(c.cam_epochs >= 0, "cam_epochs: must be >= 0");
  check(c.lr > 0.0 && std::isfinite(c.lr), "lr: must be positive and finite");
  check(c.batch_size > 0, "batch_size: must be positive");
  check(c.init_scale >= 0.0, "init_scale: must be >= 0");
  check(c.score_threshold >= 0.0 && c.score_threshold <= 1.0,
        "score_threshold: must lie in [0, 1]");
  check(c.eval_score_threshold >= 0.0 && c.eval_score_threshold <= 1.0,
        "eval_score_threshold: must lie in [0, 1]");
  check(c.match_iou > 0.0 && c.match_iou <= 1.0, "match_iou: must lie in (0, 1]");
  check(c.eval_iou > 0.0 && c.eval_iou <= 1.0, "eval_iou: must lie in (0, 1]");
  check(c.target_fppi >= 0.0, "target_fppi: must be >= 0");
  check(c.cam_tau > 0.0 && c.cam_tau < 1.0, "cam_tau: must lie in (0, 1)");
  check(c.cam_min_area < c.cam_max_area, "cam_min_area: must be below cam_max_area");
  check(c.n_train > 0, "n_train: must be positive");
  check(c.split_ratio > 0.0 && c.split_ratio <= 1.0, "split_ratio: must lie in (0, 1]");
  if (const auto* e = std::get_if<EmaNorm>(&c.norm)) {
    check(!e->alpha || (*e->alpha > 0.0 && *e->alpha < 1.0), "norm_alpha: must lie in (0, 1)");
    check(e->momentum >= 0.0 && e->momentum <= 1.0, "norm_momentum: must lie in [0, 1]");
  }
  if (const auto* o = std::get_if<OpenNorm>(&c.norm)) {
    check(o->momentum >= 0.0 && o->momentum <= 1.0, "norm_momentum: must lie in [0, 1]");
  }
  try {
    validate(c.synthetic);
  } catch (const InvalidArgument& e) {
    errs.push_back(std::string("synthetic: ") + e.what());
  }
  return errs;
}

inline DetectorConfig detector_config(const TrainConfig& c) {
  DetectorConfig d;
  d.grid_w = c.synthetic.grid_w;
  d.grid_h = c.synthetic.grid_h;
  d.feature_dim = c.synthetic.feature_dim();
  d.cell_w = c.synthetic.cell_w();
  d.cell_h = c.synthetic.cell_h();
  d.score_threshold = c.score_threshold;
  d.tau_nms = c.tau_nms;
  d.rpn_match_iou = c.match_iou;
  d.roi_match_iou = c.match_iou;
  return d;
}

struct EpochStats {
  int epoch = 0;
  int steps = 0;
  double supervised_loss = 0.0;  // mean per step
  double weak_loss = 0.0;
  double total_loss = 0.0;
  std::size_t pseudo_boxes = 0;  // summed over all weak samples seen
  std::optional<double> map;
  std::optional<double> recall_at_fppi;
};

struct EvalResult {
  double map = 0.0;
  double recall_at_fppi = 0.0;
  FrocCurve froc;
};

// Called after each step's normalization strategy, with the teacher as it was
// before and after, and the student it was blended against.
using NormStepObserver = std::function<void(const ParameterState& teacher_before,
                                            const ParameterState& teacher_after,
                                            const ParameterState& student)>;

struct TrainReport {
  std::vector<EpochStats> epochs;
  ParameterState initial;
  GridDetector teacher;
  GridDetector student;
  std::optional<EvalResult> final_eval;
};

// Per-channel mean and population variance over every cell of the images.
inline std::pair<std::vector<double>, std::vector<double>> channel_statistics(
    std::span<const FeatureGrid* const> images, int channels) {
  const auto c = static_cast<std::size_t>(channels);
  std::vector<double> mean(c, 0.0);
  std::vector<double> var(c, 0.0);
  std::size_t n = 0;
  for (const FeatureGrid* g : images) {
    for (std::size_t cell = 0; cell < g->cells(); ++cell) {
      const auto f = g->cell(cell);
      for (std::size_t k = 0; k < c; ++k) mean[k] += f[k];
      ++n;
    }
  }
  if (n == 0) return {mean, std::vector<double>(c, 1.0)};
  for (double& m : mean) m /= static_cast<double>(n);
  for (const FeatureGrid* g : images) {
    for (std::size_t cell = 0; cell < g->cells(); ++cell) {
      const auto f = g->cell(cell);
      for (std::size_t k = 0; k < c; ++k) {
        const double d = f[k] - mean[k];
        var[k] += d * d;
      }
    }
  }
  for (double& v : var) v /= static_cast<double>(n);
  return {mean, var};
}

inline EvalResult evaluate(const GridDetector& det, std::span<const AnnotationRecord> test,
                           double score_threshold, double iou_thresh, double target_fppi) {
  EvalSet eval;
  for (const AnnotationRecord& r : test) {
    require(r.is_full(), r.image_id + ": evaluation records must be fully annotated");
    eval[r.image_id] = ImageEval{r.boxes, predict(det, r.features, score_threshold)};
  }
  EvalResult out;
  out.map = mean_average_precision(eval, iou_thresh);
  out.froc = froc(eval, iou_thresh);
  out.recall_at_fppi = recall_at_fppi(out.froc, target_fppi);
  return out;
}

// Initial detector: theta ~ N(0, init_scale^2) from the seed, normalization
// statistics estimated once over every training image (the "pre-trained"
// statistics).
inline GridDetector initial_detector(const TrainConfig& config, const SplitDataset& data) {
  GridDetector det = make_detector(detector_config(config));
  Rng rng(mix_seed(config.seed, 0x1417));
  if (config.init_scale > 0.0) {
    for (double& t : det.params.theta) t = normal(rng, 0.0, config.init_scale);
  }
  std::vector<const FeatureGrid*> all;
  for (const auto& r : data.fully) all.push_back(&r.features);
  for (const auto& r : data.weakly) all.push_back(&r.features);
  auto [mean, var] = channel_statistics(all, det.config.feature_dim);
  det.params.norm_mean = std::move(mean);
  det.params.norm_var = std::move(var);
  return det;
}

inline TrainReport train(const TrainConfig& config, const SplitDataset& data,
                         std::span<const AnnotationRecord> test,
                         const NormStepObserver& on_norm_step = {}) {
  if (const auto errs = validation_errors(config); !errs.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw InvalidArgument(msg);
  }
  const DetectorConfig dcfg = detector_config(config);
  for (const auto* list : {&data.fully, &data.weakly}) {
    for (const auto& r : *list) {
      validate(r);
      detail::check_image(dcfg, r.features);
    }
  }

  GridDetector student = initial_detector(config, data);
  GridDetector teacher = student;
  TrainReport report;
  report.initial = student.params;

  // CAM boxes only exist for weak images labelled positive.
  CamBoxOptions cam_opts;
  cam_opts.tau = config.cam_tau;
  cam_opts.min_area = config.cam_min_area;
  cam_opts.max_area = config.cam_max_area;
  cam_opts.connectivity = config.cam_connectivity;
  std::vector<std::vector<Detection>> cam_boxes(data.weakly.size());
  for (std::size_t i = 0; i < data.weakly.size(); ++i) {
    const auto& r = data.weakly[i];
    if (r.image_class != 1 || !r.heatmap) continue;
    cam_opts.score = r.classifier_score;
    cam_boxes[i] = cam_to_boxes(*r.heatmap, cam_opts);
  }

  std::vector<std::vector<Detection>> gt(data.fully.size());
  for (std::size_t i = 0; i < data.fully.size(); ++i) {
    gt[i] = ground_truth_detections(data.fully[i]);
  }

  const auto bs = static_cast<std::size_t>(config.batch_size);
  const std::size_t nf = data.fully.size();
  const std::size_t nw = data.weakly.size();
  const std::size_t steps_per_epoch = (std::max(nf, nw) + bs - 1) / bs;
  const FusionOptions fusion{config.tau_nms, config.cam_epochs};
  const bool use_weak = config.lambda > 0.0;
  Rng rng(mix_seed(config.seed, 0x5eed));

  std::vector<std::size_t> perm_f(nf);
  std::vector<std::size_t> perm_w(nw);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(perm_f.begin(), perm_f.end(), std::size_t{0});
    std::iota(perm_w.begin(), perm_w.end(), std::size_t{0});
    shuffle(std::span<std::size_t>(perm_f), rng);
    shuffle(std::span<std::size_t>(perm_w), rng);

    EpochStats stats;
    stats.epoch = epoch;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      std::vector<TrainingSample> batch_s;
      std::vector<TrainingSample> batch_w;
      std::vector<const FeatureGrid*> seen;
      for (std::size_t k = 0; k < bs && nf > 0; ++k) {
        const std::size_t i = perm_f[(step * bs + k) % nf];
        batch_s.push_back({std::cref(data.fully[i].features), gt[i]});
        seen.push_back(&data.fully[i].features);
      }
      for (std::size_t k = 0; k < bs && nw > 0; ++k) {
        const std::size_t i = perm_w[(step * bs + k) % nw];
        const auto& r = data.weakly[i];
        seen.push_back(&r.features);
        // With lambda == 0 the weak branch cannot move theta, so it is not
        // built at all.
        if (!use_weak) continue;
        std::vector<Detection> pseudo;
        if (r.image_class == 1) {
          const auto teacher_dets = predict(teacher, r.features, config.score_threshold);
          pseudo = fuse_pseudo_labels(teacher_dets, cam_boxes[i], epoch, fusion);
        }
        stats.pseudo_boxes += pseudo.size();
        batch_w.push_back({std::cref(r.features), std::move(pseudo)});
      }

      StepResult r;
      student = student_step(student, batch_s, batch_w, config.lambda, config.lr, &r);
      stats.supervised_loss += r.supervised.total();
      stats.weak_loss += r.weak.total();
      stats.total_loss += r.total;
      ++stats.steps;

      const auto [batch_mean, batch_var] = channel_statistics(seen, dcfg.feature_dim);
      auto [t, s] = apply_norm_strategy(config.norm, teacher.params, student.params, batch_mean,
                                        batch_var, config.alpha);
      if (on_norm_step) on_norm_step(teacher.params, t, s);
      teacher.params = std::move(t);
      student.params = std::move(s);
      if (config.ema_schedule == EmaSchedule::kPerIteration) {
        teacher.params = ema_update(teacher.params, student.params, config.alpha);
      }
    }
    if (config.ema_schedule == EmaSchedule::kPerEpoch) {
      teacher.params = ema_update(teacher.params, student.params, config.alpha);
    }
    if (stats.steps > 0) {
      stats.supervised_loss /= stats.steps;
      stats.weak_loss /= stats.steps;
      stats.total_loss /= stats.steps;
    }
    if (!test.empty()) {
      const auto ev = evaluate(teacher, test, config.eval_score_threshold, config.eval_iou,
                               config.target_fppi);
      stats.map = ev.map;
      stats.recall_at_fppi = ev.recall_at_fppi;
    }
    report.epochs.push_back(stats);
  }

  if (!test.empty()) {
    report.final_eval = evaluate(teacher, test, config.eval_score_threshold, config.eval_iou,
                                 config.target_fppi);
  }
  report.teacher = std::move(teacher);
  report.student = std::move(student);
  return report;
}

// Synthetic benchmark for a config: n_train images split at split_ratio and
// an independent n_test held-out set.
struct Benchmark {
  SplitDataset split;
  std::vector<AnnotationRecord> test;
};

inline Benchmark make_benchmark(const TrainConfig& config) {
  validate(config.synthetic);
  Benchmark b;
  const auto records = generate_synthetic(config.n_train, config.seed, config.synthetic);
  b.split = split_partial(records, config.split_ratio, mix_seed(config.seed, 0x5917));
  if (config.n_test > 0) {
    b.test = generate_synthetic(config.n_test, mix_seed(config.seed, 0x7e57), config.synthetic,
                                config.n_train);
  }
  return b;
}

}  // namespace wsdet
