#pragma once

#include <optional>
#include <string>

#include "attune/error.hpp"
#include "attune/linalg.hpp"

namespace attune {

enum class SolveMode { Primal, Dual };

inline const char* to_string(SolveMode m) { return m == SolveMode::Primal ? "primal" : "dual"; }

/// Spectral form of the curvature M = CᵀC/n built from n curvature rows C
/// (optionally sketched as C·P). The eigendecomposition is taken of whichever
/// of CᵀC/n (primal) or CCᵀ/n (dual) is smaller, so every λ afterwards costs
/// only diagonal rescaling.
///
/// Both modes reduce to two bases with (M + λI)⁻¹Cᵀ = left·diag(1/(μ+λ))·rightᵀ:
/// primal left = V, right = CV; dual left = CᵀU, right = U.
class CurvatureContext {
 public:
  /// `force` overrides the automatic primal/dual choice.
  explicit CurvatureContext(Matrix rows, std::optional<Matrix> projection = std::nullopt,
                   std::optional<SolveMode> force = std::nullopt)
      : projection_(std::move(projection)) {
    require(rows.rows() >= 1, ErrorKind::Domain, "curvature: need at least one row");
    if (projection_) {
      require(projection_->rows() == rows.cols(), ErrorKind::Domain,
              "curvature: projection has " + std::to_string(projection_->rows()) + " rows, gradients have " +
                  std::to_string(rows.cols()) + " entries");
      rows_ = rows * *projection_;
    } else {
      rows_ = std::move(rows);
    }
    require_finite(rows_, "curvature rows");
    const double inv_n = 1.0 / static_cast<double>(rows_.rows());
    mode_ = force ? *force : rows_.rows() < rows_.cols() ? SolveMode::Dual : SolveMode::Primal;
    if (mode_ == SolveMode::Primal) {
      eig_ = sym_eig(inv_n * (rows_.transpose() * rows_));
      left_ = eig_.eigenvectors;
      right_ = rows_ * eig_.eigenvectors;
    } else {
      eig_ = sym_eig(inv_n * (rows_ * rows_.transpose()));
      left_ = rows_.transpose() * eig_.eigenvectors;
      right_ = eig_.eigenvectors;
    }
  }

  SolveMode mode() const noexcept { return mode_; }
  Eigen::Index size() const noexcept { return rows_.rows(); }
  /// Dimension of the (possibly sketched) parameter space.
  Eigen::Index dimension() const noexcept { return rows_.cols(); }
  const Matrix& rows() const noexcept { return rows_; }
  const SymEig& eig() const noexcept { return eig_; }
  const std::optional<Matrix>& projection() const noexcept { return projection_; }

  /// Nonzero-spectrum eigenvalues of M (shared by both modes), descending.
  const Vector& eigenvalues() const noexcept { return eig_.eigenvalues; }

  /// Maps full-dimension gradient rows into the context's space (G·P when sketched).
  Matrix project(const Eigen::Ref<const Matrix>& grads) const {
    if (!projection_) {
      require(grads.cols() == dimension(), ErrorKind::Dimension, "curvature: test gradient length mismatch");
      return grads;
    }
    require(grads.cols() == projection_->rows(), ErrorKind::Dimension, "curvature: test gradient length mismatch");
    return grads * *projection_;
  }

  /// Scores −G(M+λI)⁻¹Cᵀdiag(β) for already-projected test gradient rows G.
  Matrix scores(const Eigen::Ref<const Matrix>& projected, const Eigen::Ref<const Vector>& beta, double lambda) const {
    require(projected.cols() == dimension(), ErrorKind::Dimension, "curvature: test gradient length mismatch");
    require(beta.size() == size(), ErrorKind::Dimension, "curvature: right weights length mismatch");
    check_lambda(lambda);
    const Vector inv = (eig_.eigenvalues.array() + lambda).inverse();
    Matrix out = -((projected * left_) * inv.asDiagonal()) * right_.transpose();
    out *= beta.asDiagonal();
    require_finite(out, "attribution scores");
    return out;
  }

  /// Per-eigenvalue weights c with gᵀ(M+λI)⁻ᵏMg = Σ c_i/(μ_i+λ)ᵏ.
  Vector spectral_weights(const Eigen::Ref<const Vector>& projected_grad) const {
    require(projected_grad.size() == dimension(), ErrorKind::Dimension, "curvature: gradient length mismatch");
    const Vector coords = left_.transpose() * projected_grad;
    Vector w = mode_ == SolveMode::Primal ? Vector(coords.array().square() * eig_.eigenvalues.array())
                                          : Vector(coords.array().square() / static_cast<double>(size()));
    // Numerically zero eigenvalues carry only roundoff, which (μ+λ)⁻ᵏ would amplify.
    const double tol = eig_.rank_tolerance();
    for (Eigen::Index i = 0; i < w.size(); ++i)
      if (eig_.eigenvalues(i) <= tol) w(i) = 0.0;
    return w;
  }

  /// λ = 0 is allowed only when M is nonsingular.
  void check_lambda(double lambda) const {
    require(lambda >= 0.0 && std::isfinite(lambda), ErrorKind::Domain, "curvature: lambda must be >= 0");
    if (lambda > 0.0) return;
    const bool full_rank = mode_ == SolveMode::Primal && eig_.rank() == dimension();
    require(full_rank, ErrorKind::Conditioning,
            "curvature matrix is singular at lambda = 0; use a positive regularization");
  }

 private:
  Matrix rows_;
  std::optional<Matrix> projection_;
  SolveMode mode_ = SolveMode::Primal;
  SymEig eig_;
  Matrix left_;
  Matrix right_;
};

}  // namespace attune
