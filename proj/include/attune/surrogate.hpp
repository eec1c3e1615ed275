#pragma once

#include <cmath>
#include <limits>

#include "attune/curvature.hpp"
#include "attune/error.hpp"
#include "attune/linalg.hpp"

namespace attune {

/// Resolvent quadratic forms t_k = gᵀ(M+λI)⁻ᵏMg, k = 1, 2, 3.
struct TValues {
  double t1 = 0.0;
  double t2 = 0.0;
  double t3 = 0.0;
  double lambda = 0.0;
  Eigen::Index test_id = -1;
  bool degenerate = false;  // Mg vanishes numerically
};

inline constexpr double kDegenerateRatio = 1e-14;

/// Spectral weights of one test gradient, reusable across a whole λ grid.
struct SpectralWeights {
  Vector weights;       // c_i with t_k = Σ c_i/(μ_i+λ)ᵏ
  Vector eigenvalues;   // μ_i
  bool degenerate = false;
  Eigen::Index test_id = -1;
};

inline SpectralWeights spectral_weights(const CurvatureContext& ctx, const Eigen::Ref<const Vector>& grad,
                                        Eigen::Index test_id = -1) {
  const Matrix projected = ctx.project(grad.transpose());
  const Vector g = projected.row(0).transpose();
  SpectralWeights sw{ctx.spectral_weights(g), ctx.eigenvalues(), false, test_id};
  sw.weights = sw.weights.cwiseMax(0.0);
  const double mass = sw.weights.sum();
  sw.degenerate = !(mass > kDegenerateRatio * ctx.eig().max_eigenvalue() * g.squaredNorm());
  return sw;
}

inline TValues t_values(const SpectralWeights& sw, double lambda) {
  require(lambda > 0.0, ErrorKind::Domain, "t_values: lambda must be positive");
  TValues t;
  t.lambda = lambda;
  t.test_id = sw.test_id;
  t.degenerate = sw.degenerate;
  if (sw.degenerate) return t;
  const Eigen::ArrayXd inv = (sw.eigenvalues.array() + lambda).inverse();
  const Eigen::ArrayXd w1 = sw.weights.array() * inv;
  const Eigen::ArrayXd w2 = w1 * inv;
  t.t1 = w1.sum();
  t.t2 = w2.sum();
  t.t3 = (w2 * inv).sum();
  return t;
}

inline TValues t_values(const CurvatureContext& ctx, const Eigen::Ref<const Vector>& grad, double lambda) {
  return t_values(spectral_weights(ctx, grad), lambda);
}

/// Surrogate indicator ξ = t₂/√(t₁t₃).
inline double xi(const TValues& t) {
  require(!t.degenerate && t.t1 > 0.0 && t.t3 > 0.0, ErrorKind::Degenerate,
          "xi: degenerate test point (curvature annihilates its gradient)");
  return t.t2 / std::sqrt(t.t1 * t.t3);
}

}  // namespace attune
