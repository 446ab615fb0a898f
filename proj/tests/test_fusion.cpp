#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "support/oracles.hpp"
#include "wsdet/fusion.hpp"

using namespace wsdet;

namespace {

Detection det(double score, Box b, Source s = Source::kTeacher) { return Detection{score, b, s}; }

const Box kA{0, 0, 10, 10};
const Box kB{2, 2, 12, 12};
const Box kC{50, 50, 60, 60};

std::vector<Detection> random_detections(Rng& rng, std::size_t n, Source s = Source::kTeacher) {
  std::vector<Detection> out;
  for (std::size_t i = 0; i < n; ++i) {
    // Coarse scores so ties actually occur.
    const double score = static_cast<double>(uniform_int(rng, 0, 10)) / 10.0;
    out.push_back(det(score, oracle::random_int_box(rng, 40), s));
  }
  return out;
}

}  // namespace

TEST(Nms, Examples) {
  EXPECT_EQ(kDefaultNmsThreshold, 0.2);
  EXPECT_TRUE(nms({}, 0.2).empty());

  const std::vector<Detection> single{det(0.4, kA)};
  EXPECT_EQ(nms(single, 0.2), single);

  const std::vector<Detection> dup{det(0.4, kA), det(0.9, kA)};
  const auto out = nms(dup, 0.2);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].score, 0.9);
}

TEST(Nms, SuppressionUsesGreaterOrEqual) {
  // Two 10x10 boxes offset by 5: IoU exactly 1/3.
  const std::vector<Detection> d{det(0.9, Box{0, 0, 10, 10}), det(0.8, Box{5, 0, 15, 10})};
  EXPECT_EQ(nms(d, 1.0 / 3.0).size(), 1u);
  EXPECT_EQ(nms(d, 0.34).size(), 2u);
}

TEST(Nms, TiesPopInInputOrder) {
  const std::vector<Detection> d{det(0.5, kA, Source::kCam), det(0.5, kA, Source::kTeacher)};
  const auto out = nms(d, 0.2);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].source, Source::kCam);
}

TEST(Nms, ZeroThresholdKeepsOneWhenAllOverlap) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    std::vector<Detection> d;
    for (int i = 0; i < 6; ++i) {
      // Every box contains the pixel (20, 20).
      const double x0 = uniform_int(rng, 0, 20), y0 = uniform_int(rng, 0, 20);
      const double x1 = uniform_int(rng, 21, 40), y1 = uniform_int(rng, 21, 40);
      d.push_back(det(uniform01(rng), Box{x0, y0, x1, y1}));
    }
    EXPECT_EQ(nms(d, 0.0).size(), 1u);
  }
}

TEST(Nms, MatchesBruteForceAndIsAntichain) {
  Rng rng(99);
  const double taus[] = {0.0, 0.2, 0.5, 0.99};
  for (int t = 0; t < 2000; ++t) {
    const auto d = random_detections(rng, static_cast<std::size_t>(uniform_int(rng, 0, 12)));
    const double tau = taus[t % 4];
    const auto out = nms(d, tau);
    EXPECT_EQ(out, oracle::brute_force_nms(d, tau));
    for (std::size_t i = 0; i < out.size(); ++i) {
      // Subset of the input with untouched scores.
      EXPECT_NE(std::find(d.begin(), d.end(), out[i]), d.end());
      if (i > 0) {
        EXPECT_GE(out[i - 1].score, out[i].score);
      }
      for (std::size_t j = i + 1; j < out.size(); ++j) {
        EXPECT_LT(iou(out[i].box, out[j].box), tau);
      }
    }
  }
}

TEST(TopDetection, Examples) {
  const std::vector<Detection> a{det(0.3, kA), det(0.9, kB)};
  EXPECT_EQ(top_detection(a), a[1]);
  const std::vector<Detection> b{det(0.5, kA)};
  EXPECT_EQ(top_detection(b), b[0]);
  const std::vector<Detection> c{det(0.7, kA), det(0.7, kB)};
  EXPECT_EQ(top_detection(c).box, kA);
}

TEST(TopDetection, EmptyIsAnError) {
  try {
    top_detection({});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "teacher produced no detections");
  }
}

TEST(TopDetection, FirstMaximalElementOverAllPermutations) {
  std::vector<Detection> base{det(0.7, kA), det(0.2, kB), det(0.7, kC), det(0.7, Box{1, 1, 2, 2})};
  std::vector<int> idx(base.size());
  std::iota(idx.begin(), idx.end(), 0);
  do {
    std::vector<Detection> perm;
    for (int i : idx) perm.push_back(base[static_cast<std::size_t>(i)]);
    const auto first = std::find_if(perm.begin(), perm.end(),
                                    [](const Detection& d) { return d.score == 0.7; });
    EXPECT_EQ(top_detection(perm), *first);
  } while (std::next_permutation(idx.begin(), idx.end()));
}

TEST(Fuse, DefaultSchedule) { EXPECT_EQ(kDefaultCamEpochs, 2); }

TEST(Fuse, CamPhaseKeepsTopTeacherBox) {
  const std::vector<Detection> teacher{det(0.9, kA), det(0.4, kC)};
  const std::vector<Detection> cam{det(0.8, Box{30, 0, 40, 10}, Source::kCam)};
  const auto out = fuse_pseudo_labels(teacher, cam, 0);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0], teacher[0]);
  EXPECT_EQ(out[1], cam[0]);
}

TEST(Fuse, AfterCamPhaseTeacherPassesThrough) {
  const std::vector<Detection> teacher{det(0.9, kA), det(0.4, kB)};
  const std::vector<Detection> cam{det(0.8, kC, Source::kCam)};
  EXPECT_EQ(fuse_pseudo_labels(teacher, cam, 5, {0.2, 2}), teacher);
  EXPECT_EQ(fuse_pseudo_labels(teacher, cam, 2, {0.2, 2}), teacher);
}

TEST(Fuse, EmptyTeacherFallsBackToCam) {
  const std::vector<Detection> cam{det(0.8, kA, Source::kCam), det(0.8, kB, Source::kCam),
                                   det(0.8, kC, Source::kCam)};
  EXPECT_EQ(fuse_pseudo_labels({}, cam, 0), nms(cam, 0.2));
  EXPECT_EQ(fuse_pseudo_labels({}, cam, 0).size(), 2u);
}

TEST(Fuse, RejectsBadArguments) {
  EXPECT_THROW(fuse_pseudo_labels({}, {}, -1), InvalidArgument);
  EXPECT_THROW(fuse_pseudo_labels({}, {}, 0, {1.5, 2}), InvalidArgument);
}

TEST(Fuse, CamPhaseContractFuzz) {
  Rng rng(123);
  for (int t = 0; t < 1000; ++t) {
    const auto teacher = random_detections(rng, static_cast<std::size_t>(uniform_int(rng, 0, 8)));
    const auto cam =
        random_detections(rng, static_cast<std::size_t>(uniform_int(rng, 0, 8)), Source::kCam);
    const auto out = fuse_pseudo_labels(teacher, cam, 1);
    EXPECT_LE(std::count_if(out.begin(), out.end(),
                            [](const Detection& d) { return d.source == Source::kTeacher; }),
              1);
    for (std::size_t i = 0; i < out.size(); ++i) {
      for (std::size_t j = i + 1; j < out.size(); ++j) EXPECT_LT(iou(out[i].box, out[j].box), 0.2);
    }
    EXPECT_EQ(out, fuse_pseudo_labels(teacher, cam, 1));
  }
}
