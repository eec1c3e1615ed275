#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "attune/attributors.hpp"
#include "attune/curvature.hpp"
#include "attune/error.hpp"
#include "attune/linalg.hpp"
#include "attune/stats.hpp"
#include "attune/surrogate.hpp"
#include "attune/trainer.hpp"

namespace attune {

/// Per-test-point correlations between retrained outputs and additive
/// attribution predictions. Undefined points (constant input) are NaN,
/// flagged, and left out of the mean.
struct LdsReport {
  Vector scores;
  std::vector<bool> excluded;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double standard_error = std::numeric_limits<double>::quiet_NaN();
  std::size_t s = 0;
  Eigen::Index a = 0;
  std::uint64_t seed = 0;
  std::string attributor;

  std::size_t excluded_count() const { return static_cast<std::size_t>(std::count(excluded.begin(), excluded.end(), true)); }
};

/// Σ_{i∈A_j} τ(z'_t, z_i) for every subset j and test point t (s × |T|).
inline Matrix aggregate_scores(const Eigen::Ref<const Matrix>& scores, const SubsetPlan& plan) {
  require(scores.cols() == plan.n, ErrorKind::Dimension, "lds: attribution columns do not match the training set");
  Matrix agg = Matrix::Zero(static_cast<Eigen::Index>(plan.size()), scores.rows());
  for (std::size_t j = 0; j < plan.size(); ++j)
    for (auto i : plan.subsets[j]) agg.row(static_cast<Eigen::Index>(j)) += scores.col(i).transpose();
  return agg;
}

namespace detail {

template <class Corr>
LdsReport correlate(const Eigen::Ref<const Matrix>& scores, const SubsetOutputs& outs, Corr&& corr) {
  require(scores.rows() == outs.outputs.cols(), ErrorKind::Dimension,
          "lds: attribution rows do not match the test set");
  require(outs.plan.size() >= 3, ErrorKind::Domain, "lds: need at least three subsets");
  const Matrix agg = aggregate_scores(scores, outs.plan);
  LdsReport r;
  r.s = outs.plan.size();
  r.a = outs.plan.a;
  r.seed = outs.plan.seed;
  r.scores.resize(scores.rows());
  r.excluded.assign(static_cast<std::size_t>(scores.rows()), false);
  std::vector<double> kept;
  for (Eigen::Index t = 0; t < scores.rows(); ++t) {
    const Vector f = outs.outputs.col(t);
    const Vector pred = agg.col(t);
    if (is_constant(f) || is_constant(pred)) {
      r.scores(t) = std::numeric_limits<double>::quiet_NaN();
      r.excluded[static_cast<std::size_t>(t)] = true;
      continue;
    }
    r.scores(t) = corr(f, pred);
    kept.push_back(r.scores(t));
  }
  if (!kept.empty()) {
    const Eigen::Map<const Vector> k(kept.data(), static_cast<Eigen::Index>(kept.size()));
    r.mean = k.mean();
    r.standard_error = kept.size() > 1 ? std::sqrt((k.array() - r.mean).square().sum() / double(kept.size() - 1) /
                                            double(kept.size()))
                                : 0.0;
  }
  return r;
}

}  // namespace detail

/// Linear datamodeling score: Spearman per test point.
inline LdsReport lds(const AttributionMatrix& attr, const SubsetOutputs& outs) {
  LdsReport r = detail::correlate(attr.scores, outs, [](const Vector& x, const Vector& y) { return spearman(x, y); });
  r.attributor = attr.attributor;
  return r;
}

/// Pearson analogue of lds on the same plan.
inline LdsReport pearson_lds(const AttributionMatrix& attr, const SubsetOutputs& outs) {
  LdsReport r = detail::correlate(attr.scores, outs, [](const Vector& x, const Vector& y) { return pearson(x, y); });
  r.attributor = attr.attributor;
  return r;
}

inline constexpr Eigen::Index kExhaustiveLimit = 12;

struct PopulationOracle {
  SubsetOutputs outputs;  // every size-a subset, retrained
  Vector cp;              // population Pearson LDS per test point
};

/// Exhaustive population Pearson LDS: retrains on all C(n, a) subsets.
inline PopulationOracle population_pearson_lds_oracle(const Dataset& data, const ModelSpec& spec,
                                                      const TrainConfig& cfg, Eigen::Index a,
                                                      const AttributionMatrix& attr, const Dataset& test,
                                                      const RetrainOptions& opt = {}) {
  require(data.size() <= kExhaustiveLimit, ErrorKind::Capability,
          "population oracle: n = " + std::to_string(data.size()) + " exceeds the exhaustive limit of 12");
  require(spec.kind == ModelKind::LogisticRegression, ErrorKind::Capability,
          "population oracle: needs a convex model (logistic regression)");
  PopulationOracle out;
  out.outputs = retrain_subsets(data, spec, cfg, exhaustive_plan(data.size(), a), test, opt);
  out.cp = pearson_lds(attr, out.outputs).scores;
  return out;
}

/// α_i = E[f | i ∈ A] − E[f] per training index, with per-index counts.
struct AlphaResult {
  Vector alpha;
  std::vector<std::size_t> counts;
};

inline AlphaResult alpha_vector(const SubsetOutputs& outs, Eigen::Index test_index) {
  require(test_index >= 0 && test_index < outs.outputs.cols(), ErrorKind::Domain, "alpha: test index out of range");
  const Eigen::Index n = outs.plan.n;
  const Vector f = outs.outputs.col(test_index);
  AlphaResult r{Vector::Zero(n), std::vector<std::size_t>(static_cast<std::size_t>(n), 0)};
  for (std::size_t j = 0; j < outs.plan.size(); ++j) {
    for (auto i : outs.plan.subsets[j]) {
      r.alpha(i) += f(static_cast<Eigen::Index>(j));
      ++r.counts[static_cast<std::size_t>(i)];
    }
  }
  const double mean = f.mean();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto c = r.counts[static_cast<std::size_t>(i)];
    require(c > 0, ErrorKind::Domain, "alpha: training index " + std::to_string(i) + " never sampled (coverage)");
    r.alpha(i) = r.alpha(i) / static_cast<double>(c) - mean;
  }
  return r;
}

/// g = Jᵀα/n, r = −∇fᵀ(F+λI)⁻¹g, q = −∇fᵀ(F+λI)⁻²g,
/// o = (1/n)αᵀ(JJᵀ/n+λI)⁻¹α, and the ratio r/√(o·t₁).
struct OracleQuantities {
  Vector alpha;
  Vector g;
  double r = 0.0;
  double q = 0.0;
  double o = 0.0;
  double t1 = 0.0;
  double lhs = 0.0;
  double lambda = 0.0;
};

/// Evaluated in the dual (n-dimensional) form; `ctx` must be a dual context over J.
inline OracleQuantities oracle_lhs(const CurvatureContext& ctx, const Eigen::Ref<const Vector>& alpha,
                                   const Eigen::Ref<const Vector>& grad_f, double lambda) {
  require(lambda > 0.0, ErrorKind::Domain, "oracle: lambda must be positive");
  require(ctx.mode() == SolveMode::Dual && !ctx.projection(), ErrorKind::Domain,
          "oracle: needs an unprojected dual curvature context");
  const Eigen::Index n = ctx.size();
  require(alpha.size() == n, ErrorKind::Dimension, "oracle: alpha length does not match n");
  const Matrix& j = ctx.rows();
  const Matrix& u = ctx.eig().eigenvectors;
  const Eigen::ArrayXd inv = (ctx.eigenvalues().array() + lambda).inverse();
  const double inv_n = 1.0 / static_cast<double>(n);

  OracleQuantities out;
  out.alpha = alpha;
  out.lambda = lambda;
  out.g = inv_n * (j.transpose() * alpha);
  // (F+λ)⁻¹Jᵀ = JᵀU·diag(1/(μ+λ))·Uᵀ, so ∇fᵀ(F+λ)⁻ᵏg needs only n-vectors.
  const Eigen::ArrayXd ua = (u.transpose() * alpha).array();
  const Eigen::ArrayXd uj = (u.transpose() * (j * grad_f)).array();
  // Eigenvalue-zero directions of K satisfy Jᵀu = 0 and drop out of r and q.
  out.r = -inv_n * (uj * inv * ua).sum();
  out.q = -inv_n * (uj * inv * inv * ua).sum();
  out.o = inv_n * (ua.square() * inv).sum();
  const TValues t = t_values(ctx, grad_f, lambda);
  require(!t.degenerate && t.t1 > 0.0, ErrorKind::Degenerate, "oracle: t1 = 0 (F annihilates the test gradient)");
  out.t1 = t.t1;
  out.lhs = out.r / std::sqrt(out.o * out.t1);
  return out;
}

inline OracleQuantities oracle_lhs(const Eigen::Ref<const Matrix>& j, const Eigen::Ref<const Vector>& alpha,
                                   const Eigen::Ref<const Vector>& grad_f, double lambda) {
  return oracle_lhs(CurvatureContext(j, std::nullopt, SolveMode::Dual), alpha, grad_f, lambda);
}

/// Components of the population Pearson correlation between f_A and the
/// additive IFFIM prediction, assembled without retraining: Cov = a·r and
/// Var(Σ_{i∈A}τ_i) = a(n−a)/(n−1)·t₂. Valid when Σ_i ∇L(z_i) = 0.
struct PearsonComponents {
  double covariance = 0.0;
  double prediction_variance = 0.0;
  double output_variance = 0.0;
  double correlation() const { return covariance / std::sqrt(prediction_variance * output_variance); }
};

inline PearsonComponents closed_form_pearson(const OracleQuantities& oq, const TValues& t, double output_variance,
                                             Eigen::Index n, Eigen::Index a) {
  require(oq.lambda == t.lambda, ErrorKind::Domain, "closed-form pearson: oracle and t-values use different lambda");
  PearsonComponents c;
  c.covariance = static_cast<double>(a) * oq.r;
  c.prediction_variance = static_cast<double>(a) * static_cast<double>(n - a) / static_cast<double>(n - 1) * t.t2;
  c.output_variance = output_variance;
  return c;
}

/// Population moments over the rows of an exhaustive plan.
inline PearsonComponents brute_force_pearson(const Eigen::Ref<const Vector>& outputs,
                                             const Eigen::Ref<const Vector>& predictions) {
  const double s = static_cast<double>(outputs.size());
  const Vector df = outputs.array() - outputs.mean();
  const Vector dp = predictions.array() - predictions.mean();
  return {df.dot(dp) / s, dp.squaredNorm() / s, df.squaredNorm() / s};
}

}  // namespace attune
