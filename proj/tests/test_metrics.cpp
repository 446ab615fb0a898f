#include <gtest/gtest.h>

#include "support/oracles.hpp"
#include "wsdet/metrics.hpp"

using namespace wsdet;

namespace {

const Box kGt{0, 0, 10, 10};
const Box kHit{0, 0, 10, 10};
const Box kMiss{40, 40, 50, 50};

Detection det(double score, Box b) { return Detection{score, b, Source::kTeacher}; }

EvalSet random_eval_set(Rng& rng) {
  EvalSet eval;
  const auto images = uniform_int(rng, 1, 4);
  std::size_t dets_left = static_cast<std::size_t>(uniform_int(rng, 0, 20));
  for (std::int64_t i = 0; i < images; ++i) {
    ImageEval img;
    const auto n_gt = uniform_int(rng, 0, 3);
    for (std::int64_t g = 0; g < n_gt; ++g) img.ground_truth.push_back(oracle::random_int_box(rng, 32));
    const auto n_det = std::min<std::size_t>(dets_left, static_cast<std::size_t>(uniform_int(rng, 0, 8)));
    dets_left -= n_det;
    for (std::size_t d = 0; d < n_det; ++d) {
      // Near-GT boxes half the time so matches happen.
      Box b = oracle::random_int_box(rng, 32);
      if (!img.ground_truth.empty() && uniform01(rng) < 0.5) {
        const Box& g = img.ground_truth[static_cast<std::size_t>(uniform_int(rng, 0, n_gt - 1))];
        b = Box{g.x0, g.y0, g.x1 + static_cast<double>(uniform_int(rng, 0, 2)), g.y1};
      }
      img.detections.push_back(det(static_cast<double>(uniform_int(rng, 0, 10)) / 10.0, b));
    }
    eval["img" + std::to_string(i)] = img;
  }
  // Guarantee at least one ground truth.
  eval.begin()->second.ground_truth.push_back(Box{1, 1, 9, 9});
  return eval;
}

}  // namespace

TEST(MatchDetections, Examples) {
  const std::vector<Box> gts{kGt};
  // 10x10 vs 10x10 shifted by 6 -> 40/160 = 0.25.
  const std::vector<Detection> one{det(0.7, Box{6, 0, 16, 10})};
  EXPECT_EQ(match_detections(gts, one, 0.2), (std::vector<bool>{true}));

  const std::vector<Detection> two{det(0.9, kHit), det(0.8, Box{1, 0, 11, 10})};
  EXPECT_EQ(match_detections(gts, two, 0.2), (std::vector<bool>{true, false}));
  const std::vector<Detection> swapped{det(0.8, Box{1, 0, 11, 10}), det(0.9, kHit)};
  EXPECT_EQ(match_detections(gts, swapped, 0.2), (std::vector<bool>{false, true}));

  EXPECT_TRUE(match_detections(gts, {}, 0.2).empty());
  EXPECT_EQ(kDefaultMatchIou, 0.2);
}

TEST(MatchDetections, EachGroundTruthMatchedAtMostOnce) {
  Rng rng(30);
  for (int t = 0; t < 300; ++t) {
    const EvalSet eval = random_eval_set(rng);
    for (const auto& [id, img] : eval) {
      const auto flags = match_detections(img.ground_truth, img.detections, 0.2);
      EXPECT_LE(static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true)),
                img.ground_truth.size());
    }
  }
}

TEST(AveragePrecision, WorkedExamples) {
  EvalSet perfect{{"a", {{kGt}, {det(0.9, kHit)}}}};
  EXPECT_EQ(mean_average_precision(perfect), 1.0);

  EvalSet fp_first{{"a", {{kGt}, {det(0.9, kMiss), det(0.8, kHit)}}}};
  EXPECT_EQ(mean_average_precision(fp_first), 0.5);

  EvalSet tp_first{{"a", {{kGt}, {det(0.9, kHit), det(0.8, kMiss)}}}};
  EXPECT_EQ(mean_average_precision(tp_first), 1.0);
}

TEST(AveragePrecision, ZeroGroundTruthIsAnError) {
  EvalSet empty{{"a", {{}, {det(0.9, kHit)}}}};
  EXPECT_THROW(mean_average_precision(empty), Error);
  EXPECT_THROW(froc(empty), Error);
}

TEST(AveragePrecision, RejectsOutOfRangeScores) {
  EvalSet bad{{"a", {{kGt}, {det(1.5, kHit)}}}};
  EXPECT_THROW(mean_average_precision(bad), InvalidArgument);
}

TEST(AveragePrecision, MatchesThresholdEnumerationOracle) {
  Rng rng(31);
  for (int t = 0; t < 500; ++t) {
    const EvalSet eval = random_eval_set(rng);
    EXPECT_NEAR(mean_average_precision(eval, 0.2), oracle::threshold_enumeration_ap(eval, 0.2), 1e-9)
        << "trial " << t;
  }
}

// Holds whenever no detection overlaps two ground truths at the match
// threshold; otherwise a duplicate may legitimately claim the second one.
TEST(AveragePrecision, DuplicatesNeverRaiseAp) {
  Rng rng(32);
  int checked = 0;
  while (checked < 300) {
    const EvalSet eval = random_eval_set(rng);
    const bool ambiguous = std::any_of(eval.begin(), eval.end(), [](const auto& kv) {
      const auto& img = kv.second;
      return std::any_of(img.detections.begin(), img.detections.end(), [&](const Detection& d) {
        return std::count_if(img.ground_truth.begin(), img.ground_truth.end(),
                             [&](const Box& g) { return iou(d.box, g) >= 0.2; }) > 1;
      });
    });
    if (ambiguous) continue;
    ++checked;
    EvalSet doubled = eval;
    for (auto& [id, img] : doubled) {
      const auto copy = img.detections;
      img.detections.insert(img.detections.end(), copy.begin(), copy.end());
    }
    EXPECT_LE(mean_average_precision(doubled), mean_average_precision(eval) + 1e-12);
  }
}

TEST(AveragePrecision, DuplicateCanClaimSecondOverlappingGroundTruth) {
  const EvalSet eval{{"a", {{Box{0, 0, 10, 10}, Box{4, 0, 14, 10}}, {det(0.9, Box{2, 0, 12, 10})}}}};
  EvalSet doubled = eval;
  doubled["a"].detections.push_back(det(0.9, Box{2, 0, 12, 10}));
  EXPECT_EQ(mean_average_precision(eval), 0.5);
  EXPECT_EQ(mean_average_precision(doubled), 1.0);
}

TEST(AveragePrecision, MonotoneScoreRemapInvariance) {
  Rng rng(33);
  for (int t = 0; t < 300; ++t) {
    const EvalSet eval = random_eval_set(rng);
    EvalSet remapped = eval;
    for (auto& [id, img] : remapped) {
      for (auto& d : img.detections) d.score = 0.1 + 0.8 * d.score * d.score;
    }
    EXPECT_NEAR(mean_average_precision(remapped), mean_average_precision(eval), 1e-12);
    EXPECT_EQ(froc(remapped), froc(eval));
    EXPECT_EQ(recall_at_fppi(froc(remapped)), recall_at_fppi(froc(eval)));
  }
}

TEST(Froc, Examples) {
  EvalSet perfect{{"a", {{kGt}, {det(0.9, kHit)}}}};
  const auto c1 = froc(perfect);
  EXPECT_NE(std::find(c1.begin(), c1.end(), FrocPoint{0.0, 1.0}), c1.end());

  EvalSet trace{{"img1", {{kGt}, {det(0.9, kHit)}}},
                {"img2", {{kGt}, {det(0.8, kMiss), det(0.7, kHit)}}}};
  EXPECT_EQ(froc(trace), (FrocCurve{{0.0, 0.5}, {0.5, 1.0}}));

  EvalSet none{{"a", {{kGt}, {}}}};
  EXPECT_EQ(froc(none), (FrocCurve{{0.0, 0.0}}));
}

TEST(Froc, EqualScoresEnterTogether) {
  EvalSet eval{{"a", {{kGt}, {det(0.5, kMiss), det(0.5, kHit)}}}};
  EXPECT_EQ(froc(eval), (FrocCurve{{1.0, 1.0}}));
}

TEST(Froc, CurveIsMonotone) {
  Rng rng(34);
  for (int t = 0; t < 300; ++t) {
    const auto curve = froc(random_eval_set(rng));
    for (std::size_t i = 1; i < curve.size(); ++i) {
      EXPECT_GT(curve[i].fppi, curve[i - 1].fppi);
      EXPECT_GE(curve[i].recall, curve[i - 1].recall);
    }
  }
}

TEST(RecallAtFppi, Examples) {
  EXPECT_EQ(kDefaultTargetFppi, 0.5);
  EXPECT_EQ(recall_at_fppi({{0.0, 0.5}, {0.5, 1.0}}, 0.5), 1.0);
  EXPECT_EQ(recall_at_fppi({{0.0, 0.5}, {0.6, 1.0}}, 0.5), 0.5);
  EXPECT_EQ(recall_at_fppi({{0.7, 0.5}}, 0.5), 0.0);
  EXPECT_THROW(recall_at_fppi({{0.0, 0.5}}, -0.1), InvalidArgument);
}

TEST(RecallAtFppi, NonDecreasingInBudget) {
  Rng rng(35);
  for (int t = 0; t < 100; ++t) {
    const auto curve = froc(random_eval_set(rng));
    double prev = 0.0;
    for (double target = 0.0; target <= 5.0; target += 0.25) {
      const double r = recall_at_fppi(curve, target);
      EXPECT_GE(r, prev);
      prev = r;
    }
  }
}
