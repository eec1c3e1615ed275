#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "attune/error.hpp"
#include "attune/linalg.hpp"

namespace attune {

/// 1-based ranks; tied values share the average of their positions.
inline Vector average_ranks(const Eigen::Ref<const Vector>& x) {
  const auto n = static_cast<std::size_t>(x.size());
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return x(a) < x(b); });
  Vector ranks(x.size());
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && x(order[j]) == x(order[i])) ++j;
    const double avg = 0.5 * static_cast<double>(i + j + 1);
    for (std::size_t k = i; k < j; ++k) ranks(order[k]) = avg;
    i = j;
  }
  return ranks;
}

inline bool is_constant(const Eigen::Ref<const Vector>& x) {
  return x.size() == 0 || x.maxCoeff() == x.minCoeff();
}

/// Pearson correlation; constant input is a Degenerate error.
inline double pearson(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& y) {
  require(x.size() == y.size(), ErrorKind::Dimension, "correlation: length mismatch");
  require(x.size() >= 2, ErrorKind::Domain, "correlation: need at least two points");
  require(!is_constant(x) && !is_constant(y), ErrorKind::Degenerate, "correlation undefined for constant input");
  const Vector dx = x.array() - x.mean();
  const Vector dy = y.array() - y.mean();
  const double r = dx.dot(dy) / std::sqrt(dx.squaredNorm() * dy.squaredNorm());
  return std::clamp(r, -1.0, 1.0);
}

/// Pearson correlation of average ranks.
inline double spearman(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& y) {
  require(x.size() == y.size(), ErrorKind::Dimension, "spearman: length mismatch");
  require(x.size() >= 3, ErrorKind::Domain, "spearman: need at least three points");
  return pearson(average_ranks(x), average_ranks(y));
}

}  // namespace attune
