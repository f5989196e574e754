#include <gtest/gtest.h>

#include <limits>

#include "curvalid/detector.hpp"
#include "curvalid/lof.hpp"
#include "oracles.hpp"

using namespace curvalid;

namespace {

Matrix<double> uniform_cloud(std::size_t n, std::size_t d, double half_width, Rng& rng) {
  Matrix<double> m(n, d);
  for (auto& v : m.data()) v = rng.uniform(-half_width, half_width);
  return m;
}

std::vector<oracle::Point> to_points(const Matrix<double>& m) {
  std::vector<oracle::Point> out;
  for (std::size_t i = 0; i < m.rows(); ++i) out.emplace_back(m.row(i).begin(), m.row(i).end());
  return out;
}

}  // namespace

TEST(Lof, MatchesBruteForceOnRandomSets) {
  Rng rng(21);
  for (std::size_t n : {31u, 60u, 120u, 200u}) {
    for (std::size_t d : {1u, 3u, 6u}) {
      Matrix<double> pts(n, d);
      for (auto& v : pts.data()) v = rng.normal();
      const auto model = lof_fit(pts, 30);
      const oracle::BruteLof brute(to_points(pts), 30);
      const auto train = lof_training_scores(model);
      for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(train[i], brute.training_score(i), 1e-9);
      for (int q = 0; q < 20; ++q) {
        oracle::Point x(d);
        for (auto& v : x) v = 2.0 * rng.normal();
        EXPECT_NEAR(lof_score(model, x), brute.score(x), 1e-9) << "n=" << n << " d=" << d;
      }
    }
  }
}

TEST(Lof, TightClusterTrainingScores) {
  Rng rng(22);
  const auto pts = uniform_cloud(100, 3, 0.01, rng);
  for (double s : lof_training_scores(lof_fit(pts))) {
    EXPECT_GE(s, 0.8);
    EXPECT_LE(s, 1.5);
  }
}

TEST(Lof, DuplicateOfTrainingPointIsInlier) {
  Rng rng(23);
  const auto pts = uniform_cloud(300, 2, 1.0, rng);
  const auto m = lof_fit(pts);
  for (std::size_t i = 0; i < 300; i += 13) {
    if (std::abs(pts(i, 0)) > 0.8 || std::abs(pts(i, 1)) > 0.8) continue;  // interior points only
    const double s = lof_score(m, pts.row(i));
    EXPECT_GE(s, 0.7);
    EXPECT_LE(s, 1.3);
    EXPECT_EQ(lof_classify(m, pts.row(i)), Label::benign);
  }
}

TEST(Lof, FarOutlier) {
  Rng rng(24);
  const auto m = lof_fit(uniform_cloud(200, 3, 1.0, rng));
  const std::vector<double> far{100.0, 0.0, 0.0};
  EXPECT_GT(lof_score(m, far), 3.0);
  EXPECT_EQ(lof_classify(m, far), Label::adversarial);
}

TEST(Lof, TranslationInvariance) {
  Rng rng(25);
  const auto pts = uniform_cloud(120, 4, 1.0, rng);
  Matrix<double> shifted = pts;
  const std::vector<double> t{3.0, -1.5, 0.25, 8.0};
  for (std::size_t r = 0; r < shifted.rows(); ++r)
    for (std::size_t c = 0; c < 4; ++c) shifted(r, c) += t[c];
  const auto a = lof_fit(pts), b = lof_fit(shifted);
  const auto sa = lof_training_scores(a), sb = lof_training_scores(b);
  for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_NEAR(sa[i], sb[i], 1e-9);
  for (int q = 0; q < 10; ++q) {
    std::vector<double> x(4), xs(4);
    for (std::size_t c = 0; c < 4; ++c) {
      x[c] = 2.0 * rng.normal();
      xs[c] = x[c] + t[c];
    }
    EXPECT_NEAR(lof_score(a, x), lof_score(b, xs), 1e-9);
  }
}

TEST(Lof, ScoreGrowsAlongARay) {
  Rng rng(26);
  const auto m = lof_fit(uniform_cloud(200, 2, 1.0, rng));
  double prev = 0.0;
  for (int i = 0; i < 20; ++i) {
    const double r = 1.5 + 1.5 * i;
    const std::vector<double> x{r * 0.8, r * 0.6};
    const double s = lof_score(m, x);
    EXPECT_GE(s, prev) << "step " << i;
    prev = s;
  }
}

TEST(Lof, TooFewPointsIsError) {
  Rng rng(27);
  EXPECT_THROW(lof_fit(uniform_cloud(30, 2, 1.0, rng)), ValidationError);
  EXPECT_NO_THROW(lof_fit(uniform_cloud(31, 2, 1.0, rng)));
}

TEST(Lof, DuplicatesAreCollapsed) {
  Rng rng(28);
  const auto pts = uniform_cloud(40, 2, 1.0, rng);
  Matrix<double> twice = pts;
  for (std::size_t i = 0; i < 10; ++i) twice.push_row(pts.row(i));
  const auto m = lof_fit(twice);
  EXPECT_EQ(m.duplicates_removed, 10u);
  EXPECT_EQ(m.points.rows(), 40u);
  for (double l : m.lrd) EXPECT_TRUE(std::isfinite(l));
}

TEST(Lof, PermutationInvariantScores) {
  Rng rng(29);
  const auto pts = uniform_cloud(80, 3, 1.0, rng);
  std::vector<std::size_t> perm(80);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  Matrix<double> shuffled;
  for (auto i : perm) shuffled.push_row(pts.row(i));
  const auto a = lof_training_scores(lof_fit(pts));
  const auto b = lof_training_scores(lof_fit(shuffled));
  for (std::size_t j = 0; j < 80; ++j) EXPECT_NEAR(b[j], a[perm[j]], 1e-12);
}

TEST(Lof, InfiniteThresholdIsAlwaysBenign) {
  Rng rng(30);
  const auto m = lof_fit(uniform_cloud(50, 2, 1.0, rng), 30, std::numeric_limits<double>::infinity());
  const std::vector<double> far{1e6, -1e6};
  EXPECT_EQ(lof_classify(m, far), Label::benign);
}

TEST(Lof, DetectorProbabilityCrossesHalfAtThreshold) {
  Rng rng(31);
  const auto benign = uniform_cloud(100, 3, 1.0, rng);
  const auto d = train_detector_lof(benign);
  Matrix<double> q;
  q.push_row(std::vector<double>{0.0, 0.0, 0.0});
  q.push_row(std::vector<double>{50.0, 50.0, 50.0});
  const auto v = predict(d, q);
  for (const auto& x : v) EXPECT_EQ(x.verdict == Label::adversarial, x.p_adversarial > 0.5);
  EXPECT_EQ(v[0].verdict, Label::benign);
  EXPECT_EQ(v[1].verdict, Label::adversarial);
}
