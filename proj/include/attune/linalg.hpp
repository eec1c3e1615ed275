#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "attune/error.hpp"
#include "attune/rng.hpp"

namespace attune {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Process-wide instrumentation. Sweeps report these to prove amortization.
struct OperationCounters {
  std::atomic<std::uint64_t> eigendecompositions{0};
  std::atomic<std::uint64_t> retrains{0};

  void reset() noexcept {
    eigendecompositions = 0;
    retrains = 0;
  }
};

inline OperationCounters& counters() noexcept {
  static OperationCounters instance;
  return instance;
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

inline void require_finite(const Eigen::Ref<const Matrix>& m, const std::string& what) {
  require(m.allFinite(), ErrorKind::Conditioning, what + " has non-finite entries");
}

/// Eigenpairs of a symmetric matrix, eigenvalues sorted descending.
struct SymEig {
  Vector eigenvalues;
  Matrix eigenvectors;  // orthonormal columns, column i pairs with eigenvalues[i]

  Eigen::Index dimension() const noexcept { return eigenvalues.size(); }

  double max_eigenvalue() const noexcept { return eigenvalues.size() ? std::max(eigenvalues(0), 0.0) : 0.0; }

  /// Eigenvalues at or below this are numerically zero.
  double rank_tolerance() const noexcept {
    return static_cast<double>(std::max<Eigen::Index>(dimension(), 1)) * std::numeric_limits<double>::epsilon() *
           max_eigenvalue();
  }

  Eigen::Index rank() const noexcept {
    const double tol = rank_tolerance();
    return static_cast<Eigen::Index>((eigenvalues.array() > tol).count());
  }

  Matrix reconstruct() const {
    return eigenvectors * eigenvalues.asDiagonal() * eigenvectors.transpose();
  }
};

inline constexpr double kSymmetryTolerance = 1e-10;
inline constexpr double kNegativeClampRatio = 1e-10;

/// Symmetric eigendecomposition (Householder tridiagonalization + implicit QR).
/// Small negative eigenvalues (|μ| < 1e-10·μ_max) are clamped to zero.
inline SymEig sym_eig(const Eigen::Ref<const Matrix>& a) {
  require(a.rows() == a.cols(), ErrorKind::Dimension,
          "sym_eig: matrix is " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + ", not square");
  const double scale = std::max(a.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
  const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
  require(asym <= kSymmetryTolerance * scale, ErrorKind::Dimension, "sym_eig: matrix is not symmetric");
  require_finite(a, "sym_eig input");

  counters().eigendecompositions.fetch_add(1, std::memory_order_relaxed);

  Eigen::SelfAdjointEigenSolver<Matrix> solver(a);
  require(solver.info() == Eigen::Success, ErrorKind::Conditioning, "sym_eig: QR iteration did not converge");

  SymEig out;
  const Eigen::Index n = a.rows();
  out.eigenvalues = solver.eigenvalues().reverse();
  out.eigenvectors = solver.eigenvectors().rowwise().reverse();
  const double mu_max = n ? std::max(out.eigenvalues(0), 0.0) : 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double& mu = out.eigenvalues(i);
    if (mu < 0.0 && -mu < kNegativeClampRatio * mu_max) mu = 0.0;
  }
  return out;
}

/// Applies (A + λI)^-k to b through the eigendecomposition of A.
inline Vector apply_resolvent(const SymEig& eig, double lambda, const Eigen::Ref<const Vector>& b, int power = 1) {
  require(b.size() == eig.dimension(), ErrorKind::Dimension, "resolvent: vector length does not match dimension");
  Vector shifted = eig.eigenvalues.array() + lambda;
  require((shifted.array().abs() > 0.0).all(), ErrorKind::Conditioning, "resolvent: A + λI is singular");
  Vector coeffs = eig.eigenvectors.transpose() * b;
  coeffs.array() /= shifted.array().pow(power);
  return eig.eigenvectors * coeffs;
}

/// Solves (A + λI)x = b given A's eigendecomposition. O(dim²) per call, no refactorization.
inline Vector regularized_solve(const SymEig& eig, double lambda, const Eigen::Ref<const Vector>& b) {
  require(lambda > 0.0, ErrorKind::Domain, "regularized_solve: lambda must be positive");
  return apply_resolvent(eig, lambda, b, 1);
}

/// Gaussian sketch P ∈ R^{p×p̃} with i.i.d. N(0, 1/p̃) entries, filled row by row.
inline Matrix make_projection(Eigen::Index p, Eigen::Index p_tilde, SeededRng rng) {
  require(p_tilde >= 1, ErrorKind::Domain, "make_projection: projection dimension must be at least 1");
  require(p_tilde <= p, ErrorKind::Domain,
          "make_projection: projection dimension " + std::to_string(p_tilde) + " exceeds parameter count " +
              std::to_string(p));
  const double stddev = 1.0 / std::sqrt(static_cast<double>(p_tilde));
  Matrix proj(p, p_tilde);
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < p_tilde; ++j) proj(i, j) = stddev * rng.normal();
  return proj;
}

/// Xᵀ(XXᵀ + λI_n)^-k via the n×n eigendecomposition; equals (XᵀX + λI_p)^-k Xᵀ.
inline Matrix dual_resolvent_transpose(const Eigen::Ref<const Matrix>& x, double lambda, int power) {
  require(lambda > 0.0, ErrorKind::Domain, "dual resolvent: lambda must be positive");
  const SymEig eig = sym_eig(x * x.transpose());
  const Vector scale = (eig.eigenvalues.array() + lambda).pow(-power);
  return x.transpose() * (eig.eigenvectors * scale.asDiagonal() * eig.eigenvectors.transpose());
}

}  // namespace attune
