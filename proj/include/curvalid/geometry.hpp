#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "curvalid/error.hpp"
#include "curvalid/matrix.hpp"

namespace curvalid {

enum class Metric { euclidean, chebyshev };

inline double distance(std::span<const double> a, std::span<const double> b, Metric metric) {
  if (metric == Metric::chebyshev) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------------------
// k-nearest-neighbor profiles

struct KnnProfile {
  std::vector<double> distances;    // ascending, self excluded
  std::vector<std::size_t> indices;  // reference row of each distance
  std::size_t k = 0;
  Metric metric = Metric::euclidean;
};

/// The k smallest distances from `query` to the rows of `reference`.
///
/// A reference row bitwise-equal to the query is treated as the query itself
/// and skipped (at most one such row). Ties are broken by row index.
inline KnnProfile knn_profile(std::span<const double> query, const Matrix<double>& reference, std::size_t k,
                              Metric metric = Metric::euclidean) {
  if (k < 1) throw ValidationError("k must be >= 1");
  if (reference.rows() > 0 && reference.cols() != query.size()) {
    throw ShapeError("query width " + std::to_string(query.size()) + " != reference width " +
                     std::to_string(reference.cols()));
  }
  if (!all_finite(query)) throw NumericError("non-finite query vector");
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(reference.rows());
  bool self_skipped = false;
  for (std::size_t i = 0; i < reference.rows(); ++i) {
    auto row = reference.row(i);
    if (!self_skipped && bitwise_equal(row, query)) {
      self_skipped = true;
      continue;
    }
    const double d = distance(query, row, metric);
    if (!std::isfinite(d)) throw NumericError("non-finite reference row " + std::to_string(i));
    cand.emplace_back(d, i);
  }
  if (cand.size() < k) {
    throw ValidationError("need at least " + std::to_string(k) + " reference points besides the query, have " +
                          std::to_string(cand.size()));
  }
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
  KnnProfile p;
  p.k = k;
  p.metric = metric;
  for (std::size_t i = 0; i < k; ++i) {
    p.distances.push_back(cand[i].first);
    p.indices.push_back(cand[i].second);
  }
  return p;
}

// ---------------------------------------------------------------------------
// LID estimators

enum class LidEstimator {
  mom_appendix,  ///< m / (a_k - m), m = mean of the first k-1 distances
  mom_def41,     ///< -k * mu / (mu - w), mu = mean of all k distances
  mle,           ///< Levina-Bickel maximum likelihood
};

inline std::string_view to_string(LidEstimator e) {
  switch (e) {
    case LidEstimator::mom_appendix: return "mom-appendix";
    case LidEstimator::mom_def41: return "mom-def41";
    case LidEstimator::mle: return "mle";
  }
  return "mom-appendix";
}

inline LidEstimator parse_estimator(std::string_view s) {
  if (s == "mom-appendix" || s == "mom_appendix") return LidEstimator::mom_appendix;
  if (s == "mom-def41" || s == "mom_def41") return LidEstimator::mom_def41;
  if (s == "mle") return LidEstimator::mle;
  throw ValidationError("unknown estimator '" + std::string(s) + "'");
}

struct LidEstimate {
  double value = 0.0;
  std::size_t k = 0;
  LidEstimator estimator = LidEstimator::mom_appendix;
  double mu = 0.0;  // mean distance the estimator used
  double w = 0.0;   // k-th distance
};

namespace detail {
inline void check_profile(const KnnProfile& p, std::size_t min_k) {
  if (p.k < min_k || p.distances.size() != p.k) {
    throw ValidationError("profile needs k >= " + std::to_string(min_k) + " distances");
  }
}
}  // namespace detail

/// Method-of-moments LID. Zero distances are allowed and enter the mean.
inline LidEstimate lid_mom(const KnnProfile& profile, LidEstimator variant = LidEstimator::mom_appendix) {
  detail::check_profile(profile, 2);
  const auto& a = profile.distances;
  const std::size_t k = profile.k;
  LidEstimate est;
  est.k = k;
  est.estimator = variant;
  est.w = a[k - 1];
  if (variant == LidEstimator::mom_appendix) {
    est.mu = std::accumulate(a.begin(), a.end() - 1, 0.0) / static_cast<double>(k - 1);
    if (!(est.w - est.mu > 0.0)) throw DegenerateNeighborhood("all neighbor distances are equal");
    est.value = est.mu / (est.w - est.mu);
  } else if (variant == LidEstimator::mom_def41) {
    est.mu = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(k);
    if (!(est.w - est.mu > 0.0)) throw DegenerateNeighborhood("all neighbor distances are equal");
    est.value = -static_cast<double>(k) * est.mu / (est.mu - est.w);
  } else {
    throw ValidationError("lid_mom called with the mle variant");
  }
  return est;
}

/// Levina-Bickel estimate: [ (1/(k-1)) sum_j ln(a_k / a_j) ]^-1.
inline LidEstimate lid_mle(const KnnProfile& profile) {
  detail::check_profile(profile, 2);
  const auto& a = profile.distances;
  const std::size_t k = profile.k;
  if (a.front() <= 0.0) throw DegenerateNeighborhood("zero neighbor distance in MLE estimate");
  double log_sum = 0.0;
  for (std::size_t j = 0; j + 1 < k; ++j) log_sum += std::log(a[k - 1] / a[j]);
  if (!(log_sum > 0.0)) throw DegenerateNeighborhood("all neighbor distances are equal");
  LidEstimate est;
  est.k = k;
  est.estimator = LidEstimator::mle;
  est.w = a[k - 1];
  est.mu = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(k);
  est.value = static_cast<double>(k - 1) / log_sum;
  return est;
}

inline LidEstimate estimate_lid(const KnnProfile& profile, LidEstimator variant) {
  return variant == LidEstimator::mle ? lid_mle(profile) : lid_mom(profile, variant);
}

inline constexpr std::size_t kDefaultPromptLidK = 20;

/// LID of a prompt representation against a reference store (Euclidean kNN).
inline LidEstimate prompt_lid(std::span<const double> query, const Matrix<double>& reference,
                              std::size_t k = kDefaultPromptLidK,
                              LidEstimator variant = LidEstimator::mom_appendix) {
  return estimate_lid(knn_profile(query, reference, k, Metric::euclidean), variant);
}

// ---------------------------------------------------------------------------
// Angles and text curvature

namespace detail {
inline double checked_norm(std::span<const double> v, const char* name) {
  const double n = norm2(v);
  if (!(n > 0.0) || !std::isfinite(n)) throw ZeroNormVector(std::string(name) + " has zero or non-finite norm");
  return n;
}
}  // namespace detail

/// arccos of the cosine similarity, clamped to [-1, 1] first.
inline double angle_between(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ShapeError("angle_between: width mismatch");
  const double nu = detail::checked_norm(u, "u");
  const double nv = detail::checked_norm(v, "v");
  const double c = std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
  return std::acos(c);
}

/// Angular change divided by the summed inverse norms of the two vectors.
inline double text_curv_pair(std::span<const double> u, std::span<const double> v) {
  const double theta = angle_between(u, v);
  return theta / (1.0 / norm2(u) + 1.0 / norm2(v));
}

/// Tangential-angle difference in the plane spanned by u and v.
///
/// Builds the Gram-Schmidt basis e1 = u/|u|, e2 = (v - (v.e1)e1)/|...|,
/// writes v = a e1 + b e2 and returns |atan2(b, a)|. When v has no component
/// orthogonal to u the plane collapses and the plain angle (0 or pi) is used.
inline double tangential_angle_difference(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ShapeError("tangential_angle_difference: width mismatch");
  const double nu = detail::checked_norm(u, "u");
  detail::checked_norm(v, "v");
  std::vector<double> e1(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) e1[i] = u[i] / nu;
  const double a = dot<double>(v, e1);
  std::vector<double> rest(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) rest[i] = v[i] - a * e1[i];
  const double rest_norm = norm2<double>(rest);
  if (rest_norm < 1e-12) return angle_between(u, v);
  double b = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) b += v[i] * (rest[i] / rest_norm);
  return std::abs(std::atan2(b, a));
}

inline constexpr double kZeroNormGuard = 1e-12;

struct CurvatureSummary {
  std::vector<double> per_pair;
  double mean = 0.0;
  std::size_t pair_count = 0;
  bool degenerate = true;
};

/// Mean TextCurv over consecutive rows (i, i+1) with i + 1 < effective_positions.
/// Pairs touching a row with norm below 1e-12 are skipped.
inline CurvatureSummary mean_text_curv(const Matrix<double>& layer, std::size_t effective_positions) {
  if (effective_positions > layer.rows()) {
    throw ValidationError("effective_positions " + std::to_string(effective_positions) + " exceeds " +
                          std::to_string(layer.rows()) + " rows");
  }
  CurvatureSummary s;
  for (std::size_t i = 0; i + 1 < effective_positions; ++i) {
    auto u = layer.row(i);
    auto v = layer.row(i + 1);
    if (norm2(u) < kZeroNormGuard || norm2(v) < kZeroNormGuard) continue;
    s.per_pair.push_back(text_curv_pair(u, v));
  }
  s.pair_count = s.per_pair.size();
  s.degenerate = s.pair_count == 0;
  if (!s.degenerate) {
    s.mean = std::accumulate(s.per_pair.begin(), s.per_pair.end(), 0.0) / static_cast<double>(s.pair_count);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Token-level LID and global ID

inline constexpr std::size_t kDefaultTokenLidK = 5;

struct TokenLidResult {
  std::vector<LidEstimate> per_token;   // only tokens with a non-degenerate neighborhood
  std::vector<std::size_t> token_index;  // position of each estimate in the sequence
  std::size_t degenerate_tokens = 0;
  double mean = 0.0;
  double std = 0.0;  // population
};

/// Each token is a data point; its neighbors are the other tokens of the same
/// prompt. Tokens whose k neighbors are all equidistant are skipped and counted;
/// if every token is degenerate DegenerateNeighborhood is thrown.
inline TokenLidResult token_level_lid(const Matrix<double>& tokens, std::size_t k = kDefaultTokenLidK,
                                      LidEstimator variant = LidEstimator::mom_appendix) {
  if (k < 2) throw ValidationError("token-level LID needs k >= 2");
  if (tokens.rows() < k + 1) {
    throw ValidationError("token-level LID with k=" + std::to_string(k) + " needs at least " +
                          std::to_string(k + 1) + " tokens, got " + std::to_string(tokens.rows()));
  }
  TokenLidResult r;
  for (std::size_t t = 0; t < tokens.rows(); ++t) {
    // Self is excluded by index: duplicates elsewhere in the prompt stay neighbors.
    KnnProfile profile;
    profile.k = k;
    std::vector<std::pair<double, std::size_t>> cand;
    cand.reserve(tokens.rows() - 1);
    for (std::size_t o = 0; o < tokens.rows(); ++o) {
      if (o != t) cand.emplace_back(distance(tokens.row(t), tokens.row(o), Metric::euclidean), o);
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t i = 0; i < k; ++i) {
      profile.distances.push_back(cand[i].first);
      profile.indices.push_back(cand[i].second);
    }
    try {
      r.per_token.push_back(estimate_lid(profile, variant));
      r.token_index.push_back(t);
    } catch (const DegenerateNeighborhood&) {
      ++r.degenerate_tokens;
    }
  }
  if (r.per_token.empty()) throw DegenerateNeighborhood("every token has an equidistant neighborhood");
  double sum = 0.0;
  for (const auto& e : r.per_token) sum += e.value;
  r.mean = sum / static_cast<double>(r.per_token.size());
  double var = 0.0;
  for (const auto& e : r.per_token) var += (e.value - r.mean) * (e.value - r.mean);
  r.std = std::sqrt(var / static_cast<double>(r.per_token.size()));
  return r;
}

struct GidResult {
  double value = 0.0;
  std::size_t points_used = 0;
  std::size_t duplicates_removed = 0;
};

/// Removes bitwise-duplicate rows, keeping the first occurrence in row order.
inline Matrix<double> deduplicate_rows(const Matrix<double>& points, std::size_t* removed = nullptr) {
  std::vector<std::size_t> order(points.rows());
  std::iota(order.begin(), order.end(), 0);
  auto less = [&](std::size_t a, std::size_t b) {
    const int c = std::memcmp(points.row(a).data(), points.row(b).data(), points.cols() * sizeof(double));
    return c != 0 ? c < 0 : a < b;
  };
  std::sort(order.begin(), order.end(), less);
  std::vector<bool> keep(points.rows(), true);
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (bitwise_equal(points.row(order[i]), points.row(order[i - 1]))) keep[order[i]] = false;
  }
  Matrix<double> out;
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < points.rows(); ++i) {
    if (keep[i]) out.push_row(points.row(i));
    else ++dropped;
  }
  if (out.rows() == 0 && points.rows() == 0) out = Matrix<double>(0, points.cols());
  if (removed) *removed = dropped;
  return out;
}

/// Global intrinsic dimension: mean of the per-point MLE estimates over the
/// deduplicated point cloud, each point against all others.
inline GidResult gid_mle(const Matrix<double>& points, std::size_t k) {
  GidResult r;
  Matrix<double> cloud = deduplicate_rows(points, &r.duplicates_removed);
  if (cloud.rows() < k + 1) {
    throw ValidationError("GID with k=" + std::to_string(k) + " needs at least " + std::to_string(k + 1) +
                          " distinct points, got " + std::to_string(cloud.rows()));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < cloud.rows(); ++i) {
    sum += lid_mle(knn_profile(cloud.row(i), cloud, k)).value;
  }
  r.points_used = cloud.rows();
  r.value = sum / static_cast<double>(cloud.rows());
  return r;
}

}  // namespace curvalid
