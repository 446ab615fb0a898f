#include <gtest/gtest.h>

#include "wsdet/io.hpp"
#include "wsdet/train.hpp"

using namespace wsdet;

namespace {

TrainConfig small_config(NormStrategy norm = FrozenNorm{}) {
  TrainConfig c;
  c.epochs = 3;
  c.n_train = 40;
  c.n_test = 20;
  c.norm = norm;
  c.seed = 17;
  return c;
}

}  // namespace

TEST(Train, ZeroEpochsIsANoOp) {
  auto c = small_config();
  c.epochs = 0;
  const auto b = make_benchmark(c);
  const auto r = train(c, b.split, b.test);
  EXPECT_TRUE(r.epochs.empty());
  EXPECT_EQ(r.teacher.params, r.initial);
  EXPECT_EQ(r.student.params, r.initial);
}

TEST(Train, InitialStatisticsComeFromTrainingImages) {
  const auto c = small_config();
  const auto b = make_benchmark(c);
  const auto det = initial_detector(c, b.split);
  std::vector<const FeatureGrid*> all;
  for (const auto& r : b.split.fully) all.push_back(&r.features);
  for (const auto& r : b.split.weakly) all.push_back(&r.features);
  const auto [mean, var] = channel_statistics(all, c.synthetic.feature_dim());
  EXPECT_EQ(det.params.norm_mean, mean);
  EXPECT_EQ(det.params.norm_var, var);
  for (double t : det.params.theta) EXPECT_EQ(t, 0.0);
}

TEST(Train, FrozenNormLeavesStatisticsBitIdentical) {
  const auto c = small_config(FrozenNorm{});
  const auto b = make_benchmark(c);
  const auto r = train(c, b.split, b.test);
  EXPECT_EQ(r.teacher.params.norm_mean, r.initial.norm_mean);
  EXPECT_EQ(r.teacher.params.norm_var, r.initial.norm_var);
  EXPECT_EQ(r.student.params.norm_mean, r.initial.norm_mean);
  EXPECT_EQ(r.student.params.norm_var, r.initial.norm_var);
  EXPECT_NE(r.teacher.params.theta, r.initial.theta);
}

TEST(Train, OpenNormMovesOnlyTheStudent) {
  const auto c = small_config(OpenNorm{});
  const auto b = make_benchmark(c);
  const auto r = train(c, b.split, b.test);
  EXPECT_EQ(r.teacher.params.norm_mean, r.initial.norm_mean);
  EXPECT_EQ(r.teacher.params.norm_var, r.initial.norm_var);
  EXPECT_NE(r.student.params.norm_mean, r.initial.norm_mean);
  EXPECT_NE(r.student.params.norm_var, r.initial.norm_var);
}

TEST(Train, EmaNormPullsTeacherTowardStudentEveryStep) {
  const auto c = small_config(EmaNorm{});
  const auto b = make_benchmark(c);
  int steps = 0;
  const auto r = train(c, b.split, b.test,
                       [&](const ParameterState& before, const ParameterState& after,
                           const ParameterState& student) {
                         ++steps;
                         for (std::size_t k = 0; k < before.norm_mean.size(); ++k) {
                           EXPECT_LE(std::abs(after.norm_mean[k] - student.norm_mean[k]),
                                     std::abs(before.norm_mean[k] - student.norm_mean[k]));
                           EXPECT_LE(std::abs(after.norm_var[k] - student.norm_var[k]),
                                     std::abs(before.norm_var[k] - student.norm_var[k]));
                         }
                         EXPECT_EQ(after.theta, before.theta);
                       });
  EXPECT_EQ(steps, 3 * 8);
  EXPECT_NE(r.teacher.params.norm_mean, r.initial.norm_mean);
}

TEST(Train, FrozenNormObserverSeesNoChange) {
  const auto c = small_config(FrozenNorm{});
  const auto b = make_benchmark(c);
  int steps = 0;
  train(c, b.split, b.test,
        [&](const ParameterState& before, const ParameterState& after, const ParameterState&) {
          ++steps;
          EXPECT_EQ(after, before);
        });
  EXPECT_EQ(steps, 3 * 8);
}

TEST(Train, DeterministicGivenConfigAndSeed) {
  const auto c = small_config();
  const auto b1 = make_benchmark(c);
  const auto b2 = make_benchmark(c);
  const auto r1 = train(c, b1.split, b1.test);
  const auto r2 = train(c, b2.split, b2.test);
  EXPECT_EQ(to_json(r1, c).dump(), to_json(r2, c).dump());
  EXPECT_EQ(r1.teacher.params, r2.teacher.params);
  auto c2 = c;
  c2.seed = 18;
  const auto b3 = make_benchmark(c2);
  EXPECT_NE(train(c2, b3.split, b3.test).teacher.params.theta, r1.teacher.params.theta);
}

TEST(Train, ReportShape) {
  const auto c = small_config();
  const auto b = make_benchmark(c);
  const auto r = train(c, b.split, b.test);
  ASSERT_EQ(r.epochs.size(), 3u);
  EXPECT_EQ(r.epochs[0].steps, 8);  // ceil(max(10, 30) / 4)
  for (const auto& e : r.epochs) {
    EXPECT_TRUE(e.map.has_value());
    EXPECT_TRUE(e.recall_at_fppi.has_value());
    EXPECT_GE(e.total_loss, e.supervised_loss);
  }
  ASSERT_TRUE(r.final_eval.has_value());
  const auto j = to_json(r, c);
  EXPECT_TRUE(j["norm_stats_unchanged"]["teacher"].get<bool>());
  EXPECT_EQ(j["epochs"].size(), 3u);
}

TEST(Train, PerEpochEmaSchedule) {
  auto c = small_config();
  c.ema_schedule = EmaSchedule::kPerEpoch;
  c.epochs = 1;
  const auto b = make_benchmark(c);
  const auto r = train(c, b.split, b.test);
  // One EMA application: teacher = alpha * initial + (1 - alpha) * student.
  for (std::size_t i = 0; i < r.teacher.params.theta.size(); ++i) {
    EXPECT_DOUBLE_EQ(r.teacher.params.theta[i],
                     c.alpha * r.initial.theta[i] + (1.0 - c.alpha) * r.student.params.theta[i]);
  }
}

TEST(Train, RejectsInvalidConfig) {
  auto c = small_config();
  c.alpha = 1.0;
  c.batch_size = 0;
  const auto errs = validation_errors(c);
  EXPECT_EQ(errs.size(), 2u);
  const auto b = make_benchmark(small_config());
  EXPECT_THROW(train(c, b.split, b.test), InvalidArgument);
}

TEST(Train, WeakLossOnlyWhenLambdaPositive) {
  auto c = small_config();
  c.lambda = 0.0;
  const auto b = make_benchmark(c);
  const auto r = train(c, b.split, b.test);
  for (const auto& e : r.epochs) {
    EXPECT_EQ(e.weak_loss, 0.0);
    EXPECT_EQ(e.pseudo_boxes, 0u);
  }
  c.lambda = 0.25;
  const auto r2 = train(c, b.split, b.test);
  EXPECT_GT(r2.epochs[0].pseudo_boxes, 0u);
}
