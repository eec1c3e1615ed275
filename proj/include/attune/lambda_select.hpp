#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "attune/curvature.hpp"
#include "attune/error.hpp"
#include "attune/evaluation.hpp"
#include "attune/linalg.hpp"
#include "attune/surrogate.hpp"

namespace attune {

inline constexpr double kDefaultThreshold = 0.5;
inline constexpr double kMinThreshold = 0.4;
inline constexpr double kMaxThreshold = 0.6;

struct XiBar {
  double value = std::numeric_limits<double>::quiet_NaN();
  std::size_t skipped = 0;
  Vector xi;  // per test point, NaN where skipped
};

/// Mean ξ over non-degenerate test points from precomputed spectral weights.
inline XiBar xi_bar(const std::vector<SpectralWeights>& points, double lambda) {
  XiBar out;
  out.xi.resize(static_cast<Eigen::Index>(points.size()));
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t t = 0; t < points.size(); ++t) {
    const TValues tv = t_values(points[t], lambda);
    if (tv.degenerate || !(tv.t1 > 0.0) || !(tv.t3 > 0.0)) {
      out.xi(static_cast<Eigen::Index>(t)) = std::numeric_limits<double>::quiet_NaN();
      ++out.skipped;
      continue;
    }
    const double x = xi(tv);
    out.xi(static_cast<Eigen::Index>(t)) = x;
    sum += x;
    ++used;
  }
  require(used > 0, ErrorKind::Degenerate, "xi_bar: every validation point is degenerate");
  out.value = sum / static_cast<double>(used);
  return out;
}

inline std::vector<SpectralWeights> spectral_weights(const CurvatureContext& ctx, const Eigen::Ref<const Matrix>& grads) {
  std::vector<SpectralWeights> out;
  out.reserve(static_cast<std::size_t>(grads.rows()));
  for (Eigen::Index t = 0; t < grads.rows(); ++t) out.push_back(spectral_weights(ctx, grads.row(t).transpose(), t));
  return out;
}

inline XiBar xi_bar(const CurvatureContext& ctx, const Eigen::Ref<const Matrix>& grads, double lambda) {
  return xi_bar(spectral_weights(ctx, grads), lambda);
}

inline void check_threshold(double threshold) {
  require(threshold >= kMinThreshold && threshold <= kMaxThreshold, ErrorKind::Domain,
          "threshold must lie in [0.4, 0.6]");
}

/// Index of argmin |ξ̄ − threshold| over the grid; ties go to the smaller λ.
inline std::size_t select_index(const std::vector<double>& grid, const std::vector<double>& xi_bars,
                                double threshold = kDefaultThreshold) {
  require(!grid.empty(), ErrorKind::Domain, "select_lambda: candidate grid is empty");
  require(grid.size() == xi_bars.size(), ErrorKind::Dimension, "select_lambda: grid and xi_bar lengths differ");
  check_threshold(threshold);
  std::size_t best = 0;
  for (std::size_t k = 1; k < grid.size(); ++k) {
    const double d = std::abs(xi_bars[k] - threshold);
    const double db = std::abs(xi_bars[best] - threshold);
    if (d < db || (d == db && grid[k] < grid[best])) best = k;
  }
  return best;
}

/// ξ̄ over a candidate grid and the selected λ̂.
struct SurrogateReport {
  std::vector<double> grid;
  Matrix xi;  // |T| × grid
  std::vector<double> xi_bar;
  std::vector<std::size_t> skipped;
  double lambda_hat = 0.0;
  std::size_t selected = 0;
  double threshold = kDefaultThreshold;
};

inline SurrogateReport surrogate_report(const CurvatureContext& ctx, const Eigen::Ref<const Matrix>& grads,
                                        const std::vector<double>& grid, double threshold = kDefaultThreshold) {
  require(!grid.empty(), ErrorKind::Domain, "select_lambda: candidate grid is empty");
  for (double l : grid) require(l > 0.0 && std::isfinite(l), ErrorKind::Domain, "select_lambda: grid values must be positive");
  const auto points = spectral_weights(ctx, grads);
  SurrogateReport r;
  r.grid = grid;
  r.threshold = threshold;
  r.xi.resize(grads.rows(), static_cast<Eigen::Index>(grid.size()));
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const XiBar xb = xi_bar(points, grid[k]);
    r.xi.col(static_cast<Eigen::Index>(k)) = xb.xi;
    r.xi_bar.push_back(xb.value);
    r.skipped.push_back(xb.skipped);
  }
  r.selected = select_index(grid, r.xi_bar, threshold);
  r.lambda_hat = grid[r.selected];
  return r;
}

inline double select_lambda(const CurvatureContext& ctx, const Eigen::Ref<const Matrix>& grads,
                            const std::vector<double>& grid, double threshold = kDefaultThreshold) {
  return surrogate_report(ctx, grads, grid, threshold).lambda_hat;
}

/// Eigenvalues above the rank tolerance, ascending.
inline std::vector<double> nonzero_spectrum(const SymEig& eig) {
  const double tol = eig.rank_tolerance();
  std::vector<double> out;
  for (Eigen::Index i = 0; i < eig.dimension(); ++i)
    if (eig.eigenvalues(i) > tol) out.push_back(eig.eigenvalues(i));
  std::sort(out.begin(), out.end());
  return out;
}

/// Nearest-rank quantile (q in percent) of the nonzero spectrum: the
/// ceil(q/100·m)-th smallest of m nonzero eigenvalues.
inline double spectrum_quantile(const std::vector<double>& ascending_nonzero, double q) {
  require(q > 0.0 && q <= 100.0, ErrorKind::Domain, "spectrum_quantile: q must lie in (0, 100]");
  require(!ascending_nonzero.empty(), ErrorKind::Degenerate, "spectrum_quantile: spectrum is entirely zero");
  const auto m = ascending_nonzero.size();
  auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(m) - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, m);
  return ascending_nonzero[rank - 1];
}

inline double spectrum_quantile(const SymEig& eig, double q) { return spectrum_quantile(nonzero_spectrum(eig), q); }

inline constexpr std::size_t kAutoGridPoints = 25;

/// Log-spaced candidates on [max(μ_min·1e−2, 1e−12·μ_max), 1e2·μ_max].
struct GridSpec {
  std::string kind = "auto";
  std::size_t points = kAutoGridPoints;
  double lo = 0.0;
  double hi = 0.0;
  std::vector<double> values;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"kind", kind}, {"points", points}};
    if (kind == "auto") {
      j["lo"] = lo;
      j["hi"] = hi;
    } else {
      j["values"] = values;
    }
    return j;
  }
};

inline std::vector<double> log_grid(double lo, double hi, std::size_t points) {
  require(lo > 0.0 && hi >= lo && points >= 1, ErrorKind::Domain, "grid: need 0 < lo <= hi and points >= 1");
  std::vector<double> out(points);
  if (points == 1) {
    out[0] = lo;
    return out;
  }
  const double a = std::log10(lo), b = std::log10(hi);
  for (std::size_t k = 0; k < points; ++k)
    out[k] = std::pow(10.0, a + (b - a) * static_cast<double>(k) / static_cast<double>(points - 1));
  out.front() = lo;
  out.back() = hi;
  return out;
}

inline GridSpec auto_grid(const SymEig& eig, std::size_t points = kAutoGridPoints) {
  const auto spectrum = nonzero_spectrum(eig);
  require(!spectrum.empty(), ErrorKind::Degenerate, "auto grid: spectrum is entirely zero");
  const double mu_max = spectrum.back();
  GridSpec g;
  g.points = points;
  g.lo = std::max(spectrum.front() * 1e-2, 1e-12 * mu_max);
  g.hi = 1e2 * mu_max;
  g.values = log_grid(g.lo, g.hi, points);
  return g;
}

inline GridSpec explicit_grid(std::vector<double> values) {
  require(!values.empty(), ErrorKind::Domain, "grid: empty candidate list");
  for (double v : values) require(v > 0.0 && std::isfinite(v), ErrorKind::Domain, "grid: values must be positive");
  std::sort(values.begin(), values.end());
  GridSpec g;
  g.kind = "explicit";
  g.points = values.size();
  g.lo = values.front();
  g.hi = values.back();
  g.values = std::move(values);
  return g;
}

enum class Condition { Met, NotMet, Inconclusive };

inline const char* to_string(Condition c) {
  switch (c) {
    case Condition::Met: return "met";
    case Condition::NotMet: return "not-met";
    case Condition::Inconclusive: return "inconclusive";
  }
  return "?";
}

/// Oracle ratio r/√(o·t₁) against ξ at one (test point, λ). Inconclusive when r ≤ 0.
struct ConditionDiagnostic {
  double lhs = 0.0;
  double rhs = 0.0;
  Condition condition = Condition::Inconclusive;
  bool r_positive = false;
};

inline ConditionDiagnostic sufficient_condition_diagnostic(const OracleQuantities& oq, const TValues& t) {
  require(oq.lambda == t.lambda, ErrorKind::Domain, "diagnostic: oracle and t-values use different lambda");
  ConditionDiagnostic d;
  d.lhs = oq.lhs;
  d.rhs = xi(t);
  d.r_positive = oq.r > 0.0;
  d.condition = !d.r_positive ? Condition::Inconclusive : d.lhs > d.rhs ? Condition::Met : Condition::NotMet;
  return d;
}

}  // namespace attune
