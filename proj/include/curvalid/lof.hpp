#pragma once

#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "curvalid/corpus.hpp"
#include "curvalid/error.hpp"
#include "curvalid/geometry.hpp"
#include "curvalid/matrix.hpp"

namespace curvalid {

inline constexpr std::size_t kDefaultLofNeighbors = 30;
inline constexpr double kDefaultLofThreshold = 1.5;

/// Local Outlier Factor novelty model under the Chebyshev metric, exact search.
struct LofModel {
  Matrix<double> points;  // deduplicated training points
  std::size_t n_neighbors = kDefaultLofNeighbors;
  double threshold = kDefaultLofThreshold;
  // Recorded for fidelity with the reference configuration; exact search ignores them.
  std::size_t leaf_size = 10;
  int p = 1;
  std::size_t duplicates_removed = 0;

  std::vector<double> k_distance;
  std::vector<double> lrd;
  std::vector<std::vector<std::size_t>> neighbors;
};

namespace detail {

/// Mean reachability distance from a point to its neighbors, inverted.
inline double local_reachability_density(const LofModel& m, std::span<const double> distances,
                                         std::span<const std::size_t> neighbors) {
  double sum = 0.0;
  for (std::size_t i = 0; i < neighbors.size(); ++i) sum += std::max(m.k_distance[neighbors[i]], distances[i]);
  return static_cast<double>(neighbors.size()) / sum;
}

}  // namespace detail

/// Fits on benign feature rows. Exact duplicate rows are collapsed first
/// (their reachability distances would be zero); the count is recorded.
inline LofModel lof_fit(const Matrix<double>& benign, std::size_t n_neighbors = kDefaultLofNeighbors,
                        double threshold = kDefaultLofThreshold) {
  if (n_neighbors < 1) throw ValidationError("n_neighbors must be >= 1");
  LofModel m;
  m.n_neighbors = n_neighbors;
  m.threshold = threshold;
  m.points = deduplicate_rows(benign, &m.duplicates_removed);
  const std::size_t n = m.points.rows();
  if (n < n_neighbors + 1) {
    throw ValidationError("LOF with n_neighbors=" + std::to_string(n_neighbors) + " needs at least " +
                          std::to_string(n_neighbors + 1) + " distinct points, got " + std::to_string(n));
  }
  m.k_distance.resize(n);
  m.neighbors.resize(n);
  std::vector<std::vector<double>> dists(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto prof = knn_profile(m.points.row(i), m.points, n_neighbors, Metric::chebyshev);
    m.k_distance[i] = prof.distances.back();
    m.neighbors[i] = std::move(prof.indices);
    dists[i] = std::move(prof.distances);
  }
  m.lrd.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    m.lrd[i] = detail::local_reachability_density(m, dists[i], m.neighbors[i]);
    if (!(m.lrd[i] > 0.0) || !std::isfinite(m.lrd[i])) {
      throw NumericError("non-positive or infinite local reachability density at point " + std::to_string(i));
    }
  }
  return m;
}

/// Novelty score: mean neighbor lrd divided by the query's lrd.
/// A query bitwise-equal to a training point is still scored against all
/// training points (it is a new observation, not that point).
inline double lof_score(const LofModel& m, std::span<const double> x) {
  if (x.size() != m.points.cols()) throw ShapeError("LOF query width mismatch");
  if (!all_finite(x)) throw NumericError("non-finite LOF query");
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(m.points.rows());
  for (std::size_t i = 0; i < m.points.rows(); ++i) cand.emplace_back(distance(x, m.points.row(i), Metric::chebyshev), i);
  const auto k = static_cast<std::ptrdiff_t>(m.n_neighbors);
  std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
  std::vector<double> d;
  std::vector<std::size_t> nb;
  for (std::ptrdiff_t i = 0; i < k; ++i) {
    d.push_back(cand[static_cast<std::size_t>(i)].first);
    nb.push_back(cand[static_cast<std::size_t>(i)].second);
  }
  const double lrd_q = detail::local_reachability_density(m, d, nb);
  if (!std::isfinite(lrd_q)) return 0.0;  // unreachable: k_distance > 0 after dedup
  double mean_lrd = 0.0;
  for (auto j : nb) mean_lrd += m.lrd[j];
  mean_lrd /= static_cast<double>(nb.size());
  return mean_lrd / lrd_q;
}

/// LOF of each training point against the rest of the training set.
inline std::vector<double> lof_training_scores(const LofModel& m) {
  std::vector<double> out(m.points.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double mean_lrd = 0.0;
    for (auto j : m.neighbors[i]) mean_lrd += m.lrd[j];
    mean_lrd /= static_cast<double>(m.neighbors[i].size());
    out[i] = mean_lrd / m.lrd[i];
  }
  return out;
}

inline Label lof_classify(const LofModel& m, std::span<const double> x) {
  return lof_score(m, x) > m.threshold ? Label::adversarial : Label::benign;
}

}  // namespace curvalid
