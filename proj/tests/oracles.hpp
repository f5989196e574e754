#pragma once

// Direct, unoptimized reference computations used to cross-check the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

namespace oracle {

using Point = std::vector<double>;

inline double euclid(const Point& a, const Point& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline double chebyshev(const Point& a, const Point& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Indices of the k nearest points to points[i] other than i, full stable sort.
template <typename Dist>
std::vector<std::size_t> neighbors_of(const std::vector<Point>& points, std::size_t i, std::size_t k, Dist dist) {
  std::vector<std::size_t> idx;
  for (std::size_t j = 0; j < points.size(); ++j)
    if (j != i) idx.push_back(j);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return dist(points[i], points[a]) < dist(points[i], points[b]); });
  idx.resize(k);
  return idx;
}

/// Textbook LOF with exactly k neighbors, Chebyshev metric. Returns
/// training-point scores and a scorer for new queries.
struct BruteLof {
  std::vector<Point> pts;
  std::size_t k;
  std::vector<std::vector<std::size_t>> nb;
  std::vector<double> kdist, lrd;

  BruteLof(std::vector<Point> points, std::size_t k_) : pts(std::move(points)), k(k_) {
    const std::size_t n = pts.size();
    nb.resize(n);
    kdist.resize(n);
    lrd.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      nb[i] = neighbors_of(pts, i, k, chebyshev);
      kdist[i] = chebyshev(pts[i], pts[nb[i].back()]);
    }
    for (std::size_t i = 0; i < n; ++i) {
      double reach = 0.0;
      for (auto o : nb[i]) reach += std::max(kdist[o], chebyshev(pts[i], pts[o]));
      lrd[i] = static_cast<double>(k) / reach;
    }
  }

  double training_score(std::size_t i) const {
    double s = 0.0;
    for (auto o : nb[i]) s += lrd[o];
    return s / static_cast<double>(k) / lrd[i];
  }

  double score(const Point& q) const {
    std::vector<std::size_t> idx(pts.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return chebyshev(q, pts[a]) < chebyshev(q, pts[b]); });
    idx.resize(k);
    double reach = 0.0, mean_lrd = 0.0;
    for (auto o : idx) {
      reach += std::max(kdist[o], chebyshev(q, pts[o]));
      mean_lrd += lrd[o];
    }
    const double lrd_q = static_cast<double>(k) / reach;
    return mean_lrd / static_cast<double>(k) / lrd_q;
  }
};

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

/// Spearman rank correlation; inputs must be free of ties.
inline double spearman_no_ties(const std::vector<double>& x, const std::vector<double>& y) {
  auto rank = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double below = 0;
      for (double w : v) below += w < v[i];
      r[i] = below + 1;
    }
    return r;
  };
  const auto rx = rank(x), ry = rank(y);
  double d2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  const double n = static_cast<double>(x.size());
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

}  // namespace oracle
