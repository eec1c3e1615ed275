#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "attune/curvature.hpp"
#include "attune/error.hpp"
#include "attune/hash.hpp"
#include "attune/linalg.hpp"
#include "attune/matrix_io.hpp"
#include "attune/model.hpp"
#include "attune/parallel.hpp"
#include "attune/trainer.hpp"

namespace attune {

/// |T|×n scores τ(z'_t, z_i) plus provenance for the sidecar file.
struct AttributionMatrix {
  Matrix scores;
  std::string attributor;
  nlohmann::json hyperparams = nlohmann::json::object();
  std::string checkpoint_hash;
  nlohmann::json diagnostics = nlohmann::json::object();
};

inline std::string checkpoint_hash(const Checkpoint& c) {
  std::ostringstream os;
  write_checkpoint(os, c);
  return sha256_hex(os.str());
}

/// Writes `<path>` (ATRM scores) and `<path>.json` (sidecar).
inline void save_attribution(const std::filesystem::path& path, const AttributionMatrix& a) {
  save_matrix(path, a.scores);
  const nlohmann::json sidecar = {{"attributor-id", a.attributor},
                                  {"hyperparams", a.hyperparams},
                                  {"checkpoint hash", a.checkpoint_hash},
                                  {"diagnostics", a.diagnostics},
                                  {"rows", a.scores.rows()},
                                  {"cols", a.scores.cols()}};
  std::ofstream os(path.string() + ".json");
  require(os.good(), ErrorKind::Format, "cannot write " + path.string() + ".json");
  os << sidecar.dump(2) << '\n';
}

inline AttributionMatrix load_attribution(const std::filesystem::path& path) {
  AttributionMatrix a;
  a.scores = load_matrix(path);
  std::ifstream is(path.string() + ".json");
  require(is.good(), ErrorKind::Format, "missing sidecar " + path.string() + ".json");
  try {
    const auto j = nlohmann::json::parse(is);
    a.attributor = j.at("attributor-id").get<std::string>();
    a.hyperparams = j.at("hyperparams");
    a.checkpoint_hash = j.at("checkpoint hash").get<std::string>();
    if (j.contains("diagnostics")) a.diagnostics = j.at("diagnostics");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatCode::Malformed, std::string("bad attribution sidecar: ") + e.what());
  }
  return a;
}

// ---------------------------------------------------------------------------
// Fisher-based attributors

/// Curvature context over per-example loss gradients: M is the empirical FIM.
inline CurvatureContext fim_context(const Checkpoint& ckpt, const Dataset& data,
                                    std::optional<Matrix> projection = std::nullopt) {
  return CurvatureContext(per_example_grads(ckpt, data), std::move(projection));
}

/// −∇f(z'_t)ᵀ(F+λI)⁻¹∇L(z_i); sketched by P when the context carries one.
inline AttributionMatrix iffim(const CurvatureContext& ctx, const Eigen::Ref<const Matrix>& test_grads,
                               double lambda) {
  require(lambda > 0.0, ErrorKind::Domain, "iffim: lambda must be positive");
  AttributionMatrix out;
  out.scores = ctx.scores(ctx.project(test_grads), Vector::Ones(ctx.size()), lambda);
  out.attributor = ctx.projection() ? "iffim-projected" : "iffim";
  out.hyperparams = {{"lambda", lambda}, {"mode", to_string(ctx.mode())}};
  if (ctx.projection()) out.hyperparams["projection_dim"] = ctx.dimension();
  return out;
}

inline AttributionMatrix iffim_projected(const CurvatureContext& ctx, const Eigen::Ref<const Matrix>& test_grads,
                                         double lambda) {
  require(ctx.projection().has_value(), ErrorKind::Domain, "iffim_projected: context has no projection");
  return iffim(ctx, test_grads, lambda);
}

/// TRAK curvature: rows √r_i·Φ_i with weights −√((1−p_i)/p_i) (GGN form), or
/// rows Φ_i with weights −(1−p_i) when R is dropped. Gradients are sketched
/// before the (1−p) factor is applied.
struct TrakContext {
  CurvatureContext curvature;
  Vector beta;
  bool with_r = false;
};

inline TrakContext trak_context(const Eigen::Ref<const Matrix>& output_rows, const Eigen::Ref<const Vector>& probs,
                                bool with_r, std::optional<Matrix> projection = std::nullopt) {
  require(output_rows.rows() == probs.size(), ErrorKind::Dimension, "trak: probability count mismatch");
  require((probs.array() > 0.0).all() && (probs.array() < 1.0).all(), ErrorKind::Domain,
          "trak: probabilities must lie in (0, 1)");
  if (!with_r) return {CurvatureContext(output_rows, std::move(projection)), -(1.0 - probs.array()).matrix(), false};
  const Vector root_r = (probs.array() * (1.0 - probs.array())).sqrt();
  const Vector beta = -((1.0 - probs.array()) / probs.array()).sqrt();
  return {CurvatureContext(root_r.asDiagonal() * output_rows, std::move(projection)), beta, true};
}

inline TrakContext trak_context(const Checkpoint& ckpt, const Dataset& data, bool with_r,
                                std::optional<Matrix> projection = std::nullopt) {
  return trak_context(output_grads(ckpt, data), model_probabilities(ckpt, data), with_r, std::move(projection));
}

/// ∇f(z'_t)ᵀ(M+λI)⁻¹∇f(z_i)(1−p_i). λ = 0 requires a nonsingular M.
inline AttributionMatrix trak(const TrakContext& ctx, const Eigen::Ref<const Matrix>& test_grads, double lambda) {
  AttributionMatrix out;
  out.scores = ctx.curvature.scores(ctx.curvature.project(test_grads), ctx.beta, lambda);
  out.attributor = "trak";
  out.hyperparams = {{"lambda", lambda}, {"with_r", ctx.with_r}, {"mode", to_string(ctx.curvature.mode())}};
  if (ctx.curvature.projection()) out.hyperparams["projection_dim"] = ctx.curvature.dimension();
  return out;
}

// ---------------------------------------------------------------------------
// Hessian-based attributors

/// −G(H+λI)⁻¹Jᵀ with a dense Cholesky factorization.
inline Matrix explicit_influence(const Eigen::Ref<const Matrix>& hessian, const Eigen::Ref<const Matrix>& test_grads,
                                 const Eigen::Ref<const Matrix>& train_grads, double lambda) {
  require(hessian.rows() == hessian.cols() && test_grads.cols() == hessian.rows() &&
              train_grads.cols() == hessian.rows(),
          ErrorKind::Dimension, "explicit influence: dimension mismatch");
  Matrix shifted = hessian;
  shifted.diagonal().array() += lambda;
  Eigen::LLT<Matrix> llt(shifted);
  require(llt.info() == Eigen::Success, ErrorKind::Conditioning,
          "explicit influence: H + lambda I is not positive definite; increase lambda");
  const Matrix solved = llt.solve(test_grads.transpose());
  Matrix scores = -(solved.transpose() * train_grads.transpose());
  require_finite(scores, "explicit influence scores");
  return scores;
}

inline constexpr Eigen::Index kExplicitParameterLimit = 2048;

/// Exact-Hessian influence. With `last_layer`, only output-layer parameters
/// enter the gradients and the Hessian block.
inline AttributionMatrix if_explicit(const Checkpoint& ckpt, const Dataset& data, const Dataset& test, double lambda,
                                     bool last_layer = false) {
  const Eigen::Index offset = last_layer ? ckpt.spec.last_layer_offset() : 0;
  const Eigen::Index m = ckpt.spec.parameter_count() - offset;
  require(m <= kExplicitParameterLimit, ErrorKind::Capability,
          "if-explicit: " + std::to_string(m) + " parameters exceed the dense Hessian limit of " +
              std::to_string(kExplicitParameterLimit) + "; use if-cg or if-lissa, or last_layer");
  require(lambda >= 0.0, ErrorKind::Domain, "if-explicit: lambda must be >= 0");
  require(lambda > 0.0 || ckpt.spec.kind == ModelKind::LogisticRegression, ErrorKind::Domain,
          "if-explicit: lambda must be positive for non-convex models");
  const Matrix hess = objective_hessian(ckpt.spec, ckpt.theta, data, ckpt.weight_decay, offset);
  AttributionMatrix out;
  out.scores = explicit_influence(hess, output_grads(ckpt, test).rightCols(m), per_example_grads(ckpt, data).rightCols(m),
                                  lambda);
  out.attributor = "if-explicit";
  out.hyperparams = {{"lambda", lambda}, {"last_layer", last_layer}};
  out.checkpoint_hash = checkpoint_hash(ckpt);
  return out;
}

/// Runs `iterations` conjugate-gradient steps on op(x) = b from x = 0, stopping
/// early once the residual is at rounding level (‖r‖ ≤ ε‖b‖), where further
/// steps carry no information. Iterates are appended to `trace` when given.
template <class Op>
Vector conjugate_gradient(Op&& op, const Eigen::Ref<const Vector>& b, std::uint64_t iterations,
                          std::vector<Vector>* trace = nullptr) {
  require(iterations >= 1, ErrorKind::Domain, "cg: max_iteration must be at least 1");
  Vector x = Vector::Zero(b.size());
  Vector r = b;
  Vector p = r;
  double rr = r.squaredNorm();
  const double floor = std::pow(std::numeric_limits<double>::epsilon(), 2) * rr;
  for (std::uint64_t k = 0; k < iterations && rr > floor; ++k) {
    const Vector ap = op(p);
    const double pap = p.dot(ap);
    require(pap > 0.0 && std::isfinite(pap), ErrorKind::Conditioning,
            "cg: operator is not positive definite along the search direction; increase lambda");
    const double alpha = rr / pap;
    x += alpha * p;
    r -= alpha * ap;
    require(x.allFinite(), ErrorKind::Conditioning, "cg: iterate became non-finite");
    const double rr_next = r.squaredNorm();
    p = r + (rr_next / rr) * p;
    rr = rr_next;
    if (trace) trace->push_back(x);
  }
  return x;
}

inline AttributionMatrix if_cg(const Checkpoint& ckpt, const Dataset& data, const Dataset& test, double lambda,
                               std::uint64_t max_iteration, std::size_t workers = default_workers()) {
  require(lambda > 0.0, ErrorKind::Domain, "if-cg: lambda must be positive");
  require(max_iteration >= 1, ErrorKind::Domain, "if-cg: max_iteration must be at least 1");
  const Matrix g = output_grads(ckpt, test);
  Matrix solved(g.rows(), g.cols());
  parallel_for(static_cast<std::size_t>(g.rows()), workers, [&](std::size_t t) {
    auto op = [&](const Vector& v) -> Vector {
      return hessian_vector_product(ckpt.spec, ckpt.theta, data, ckpt.weight_decay, v) + lambda * v;
    };
    solved.row(static_cast<Eigen::Index>(t)) =
        conjugate_gradient(op, g.row(static_cast<Eigen::Index>(t)).transpose(), max_iteration).transpose();
  });
  AttributionMatrix out;
  out.scores = -(solved * per_example_grads(ckpt, data).transpose());
  out.attributor = "if-cg";
  out.hyperparams = {{"lambda", lambda}, {"max_iteration", max_iteration}};
  out.checkpoint_hash = checkpoint_hash(ckpt);
  return out;
}

inline constexpr double kLissaDivergenceNorm = 1e12;

/// vᵗ = b + (I − (Hᵗ + λI)/η)vᵗ⁻¹ from v⁰ = b; returns v^depth/η ≈ (H+λI)⁻¹b.
/// op(v, t) is the step-t (possibly mini-batch) Hessian-vector product.
template <class Op>
Vector lissa_solve(Op&& op, const Eigen::Ref<const Vector>& b, double lambda, double scaling, std::uint64_t depth,
                   std::vector<Vector>* trace = nullptr) {
  require(scaling > 0.0, ErrorKind::Domain, "lissa: scaling must be positive");
  require(lambda >= 0.0, ErrorKind::Domain, "lissa: lambda must be >= 0");
  Vector v = b;
  if (trace) trace->push_back(v);
  for (std::uint64_t t = 1; t <= depth; ++t) {
    v = b + v - (op(v, t) + lambda * v) / scaling;
    if (!(v.norm() <= kLissaDivergenceNorm))
      fail(ErrorKind::Divergence, "lissa: iterate norm exceeded 1e12 at step " + std::to_string(t) +
                                      "; increase the scaling so it exceeds the largest eigenvalue of H + lambda I");
    if (trace) trace->push_back(v);
  }
  return v / scaling;
}

struct LissaParams {
  double scaling = 5.0;
  std::uint64_t depth = 1000;
  std::uint64_t batch_size = 50;  // 0 = full batch
  std::uint64_t seed = 0;
};

inline AttributionMatrix if_lissa(const Checkpoint& ckpt, const Dataset& data, const Dataset& test, double lambda,
                                  const LissaParams& lp, std::size_t workers = default_workers()) {
  const Matrix g = output_grads(ckpt, test);
  Matrix solved(g.rows(), g.cols());
  const auto n = static_cast<std::uint64_t>(data.size());
  parallel_for(static_cast<std::size_t>(g.rows()), workers, [&](std::size_t t) {
    SeededRng rng = SeededRng(lp.seed, 0x2001).split(t);
    std::vector<Eigen::Index> batch(lp.batch_size);
    auto op = [&](const Vector& v, std::uint64_t) -> Vector {
      if (lp.batch_size == 0) return hessian_vector_product(ckpt.spec, ckpt.theta, data, ckpt.weight_decay, v);
      for (auto& i : batch) i = static_cast<Eigen::Index>(rng.uniform_index(n));
      return hessian_vector_product(ckpt.spec, ckpt.theta, data.subset(batch), ckpt.weight_decay, v);
    };
    solved.row(static_cast<Eigen::Index>(t)) =
        lissa_solve(op, g.row(static_cast<Eigen::Index>(t)).transpose(), lambda, lp.scaling, lp.depth).transpose();
  });
  AttributionMatrix out;
  out.scores = -(solved * per_example_grads(ckpt, data).transpose());
  out.attributor = "if-lissa";
  out.hyperparams = {{"lambda", lambda},
                     {"scaling", lp.scaling},
                     {"recursion_depth", lp.depth},
                     {"batch_size", lp.batch_size},
                     {"sampling", "with-replacement"},
                     {"seed", lp.seed}};
  out.checkpoint_hash = checkpoint_hash(ckpt);
  return out;
}

// ---------------------------------------------------------------------------
// TracIn

/// Σ_t η_t⟨∇f(z',θ_t), ∇L(z_i,θ_t)⟩, optionally on unit-normalized (and
/// sketched) gradients. Zero-norm gradients under normalization contribute 0
/// and are tallied in diagnostics["zero_norm_pairs"].
inline AttributionMatrix tracin(const std::vector<Checkpoint>& series, const std::vector<double>& learning_rates,
                                const Dataset& data, const Dataset& test, bool normalize,
                                const std::optional<Matrix>& projection = std::nullopt) {
  require(!series.empty(), ErrorKind::Domain, "tracin: checkpoint series is empty");
  require(series.size() == learning_rates.size(), ErrorKind::Dimension,
          "tracin: learning rates must align with checkpoints");
  Matrix scores = Matrix::Zero(test.size(), data.size());
  std::uint64_t zero_pairs = 0;
  for (std::size_t c = 0; c < series.size(); ++c) {
    Matrix g = output_grads(series[c], test);
    Matrix j = per_example_grads(series[c], data);
    if (projection) {
      require(projection->rows() == g.cols(), ErrorKind::Domain, "tracin: projection dimension mismatch");
      g = g * *projection;
      j = j * *projection;
    }
    if (normalize) {
      const Vector gn = g.rowwise().norm();
      const Vector jn = j.rowwise().norm();
      for (Eigen::Index t = 0; t < g.rows(); ++t) g.row(t) = gn(t) > 0 ? (g.row(t) / gn(t)).eval() : g.row(t) * 0.0;
      for (Eigen::Index i = 0; i < j.rows(); ++i) j.row(i) = jn(i) > 0 ? (j.row(i) / jn(i)).eval() : j.row(i) * 0.0;
      const auto zg = static_cast<std::uint64_t>((gn.array() == 0.0).count());
      const auto zj = static_cast<std::uint64_t>((jn.array() == 0.0).count());
      zero_pairs += zg * static_cast<std::uint64_t>(j.rows()) + zj * static_cast<std::uint64_t>(g.rows()) - zg * zj;
    }
    scores += learning_rates[c] * (g * j.transpose());
  }
  AttributionMatrix out;
  out.scores = std::move(scores);
  out.attributor = "tracin";
  out.hyperparams = {{"normalize", normalize}, {"checkpoints", series.size()}};
  if (projection) out.hyperparams["projection_dim"] = projection->cols();
  out.diagnostics = {{"zero_norm_pairs", zero_pairs}};
  out.checkpoint_hash = checkpoint_hash(series.back());
  return out;
}

}  // namespace attune
