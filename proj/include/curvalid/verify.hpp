#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "curvalid/geometry.hpp"
#include "curvalid/matrix.hpp"
#include "curvalid/random.hpp"

namespace curvalid {

struct TheoremCheck {
  std::size_t pairs = 0;
  double max_deviation = 0.0;
};

/// Random Gaussian pairs spread evenly over `dims`; compares the inter-vector
/// angle with the tangential-angle construction.
inline TheoremCheck theorem_check(std::uint64_t seed, std::size_t pairs = 1000,
                                  const std::vector<std::size_t>& dims = {2, 3, 16, 128, 512}) {
  Rng rng(seed);
  TheoremCheck r;
  std::vector<double> u, v;
  for (std::size_t i = 0; i < pairs; ++i) {
    const std::size_t d = dims[i % dims.size()];
    u.resize(d);
    v.resize(d);
    for (auto& x : u) x = rng.normal();
    for (auto& x : v) x = rng.normal();
    const double dev = std::abs(angle_between(u, v) - tangential_angle_difference(u, v));
    r.max_deviation = std::max(r.max_deviation, dev);
    ++r.pairs;
  }
  return r;
}

/// Uniform draw from the unit d-ball: Gaussian direction, radius U^(1/d).
inline std::vector<double> sample_unit_ball(std::size_t d, Rng& rng) {
  std::vector<double> x(d);
  double n = 0.0;
  do {
    for (auto& v : x) v = rng.normal();
    n = norm2<double>(x);
  } while (n == 0.0);
  const double r = std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
  for (auto& v : x) v *= r / n;
  return x;
}

struct LidBallRow {
  std::size_t dim = 0;
  LidEstimator estimator = LidEstimator::mom_appendix;
  double mean = 0.0;
  double relative_error = 0.0;
};

struct LidBallConfig {
  std::vector<std::size_t> dims = {1, 2, 5, 8};
  std::size_t seeds = 10;
  std::size_t points = 5000;
  std::size_t k = 50;
  std::size_t queries_per_seed = 10;  // the center plus points within radius 0.3
  double query_radius = 0.3;
};

/// Mean LID estimate over all seeds and queries for each (dimension, estimator).
/// Queries sit well inside the ball so neighborhoods do not touch the boundary.
inline std::vector<LidBallRow> lid_ball_check(std::uint64_t seed, const LidBallConfig& cfg = {},
                                              const std::vector<LidEstimator>& estimators = {
                                                  LidEstimator::mom_appendix, LidEstimator::mle}) {
  std::vector<LidBallRow> rows;
  Rng master(seed);
  for (std::size_t d : cfg.dims) {
    std::vector<double> sums(estimators.size(), 0.0);
    std::size_t count = 0;
    for (std::size_t s = 0; s < cfg.seeds; ++s) {
      Rng rng(master.fork());
      Matrix<double> ref(cfg.points, d);
      for (std::size_t i = 0; i < cfg.points; ++i) {
        auto p = sample_unit_ball(d, rng);
        std::copy(p.begin(), p.end(), ref.row(i).begin());
      }
      for (std::size_t q = 0; q < cfg.queries_per_seed; ++q) {
        std::vector<double> query(d, 0.0);
        if (q > 0) {
          query = sample_unit_ball(d, rng);
          for (auto& v : query) v *= cfg.query_radius;
        }
        const auto profile = knn_profile(query, ref, cfg.k, Metric::euclidean);
        for (std::size_t e = 0; e < estimators.size(); ++e) sums[e] += estimate_lid(profile, estimators[e]).value;
        ++count;
      }
    }
    for (std::size_t e = 0; e < estimators.size(); ++e) {
      LidBallRow row;
      row.dim = d;
      row.estimator = estimators[e];
      row.mean = sums[e] / static_cast<double>(count);
      row.relative_error = std::abs(row.mean - static_cast<double>(d)) / static_cast<double>(d);
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace curvalid
