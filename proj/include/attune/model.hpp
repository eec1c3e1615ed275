#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "attune/error.hpp"
#include "attune/linalg.hpp"
#include "attune/rng.hpp"

namespace attune {

/// Training set or test set: n×d features and labels in [0, classes).
struct Dataset {
  Matrix features;
  std::vector<int> labels;
  Eigen::Index classes = 2;
  std::string name;

  Eigen::Index size() const noexcept { return features.rows(); }
  Eigen::Index dim() const noexcept { return features.cols(); }

  void validate() const {
    require(size() >= 1, ErrorKind::Domain, "dataset '" + name + "' is empty");
    require(static_cast<Eigen::Index>(labels.size()) == size(), ErrorKind::Dimension,
            "dataset '" + name + "': label count does not match feature rows");
    require(classes >= 2, ErrorKind::Domain, "dataset '" + name + "': need at least two classes");
    for (int y : labels)
      require(y >= 0 && y < classes, ErrorKind::Domain, "dataset '" + name + "': label out of range");
    require(features.allFinite(), ErrorKind::Domain, "dataset '" + name + "': non-finite features");
  }

  /// Rows selected by `indices`, in the given order.
  Dataset subset(std::span<const Eigen::Index> indices) const {
    Dataset out;
    out.features.resize(static_cast<Eigen::Index>(indices.size()), dim());
    out.labels.reserve(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
      out.features.row(static_cast<Eigen::Index>(r)) = features.row(indices[r]);
      out.labels.push_back(labels[static_cast<std::size_t>(indices[r])]);
    }
    out.classes = classes;
    out.name = name;
    return out;
  }
};

enum class ModelKind { LogisticRegression, Mlp };

inline const char* to_string(ModelKind kind) {
  return kind == ModelKind::LogisticRegression ? "logistic-regression" : "mlp";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "logistic-regression" || s == "lr") return ModelKind::LogisticRegression;
  if (s == "mlp") return ModelKind::Mlp;
  fail(ErrorKind::Config, "unknown model kind '" + s + "'");
}

/// Multinomial logistic regression (K×d weights, no bias) or a one-hidden-layer
/// tanh MLP with biases. Parameter layout for the MLP is W1 (h×d, row-major),
/// b1 (h), W2 (K×h, row-major), b2 (K).
struct ModelSpec {
  ModelKind kind = ModelKind::LogisticRegression;
  Eigen::Index input_dim = 0;
  Eigen::Index hidden_dim = 0;
  Eigen::Index classes = 2;

  Eigen::Index parameter_count() const noexcept {
    if (kind == ModelKind::LogisticRegression) return classes * input_dim;
    return hidden_dim * input_dim + hidden_dim + classes * hidden_dim + classes;
  }

  /// First index of the output layer's parameters.
  Eigen::Index last_layer_offset() const noexcept {
    return kind == ModelKind::LogisticRegression ? 0 : hidden_dim * input_dim + hidden_dim;
  }

  void validate() const {
    require(input_dim >= 1, ErrorKind::Domain, "model: input dimension must be positive");
    require(classes >= 2, ErrorKind::Domain, "model: need at least two classes");
    if (kind == ModelKind::Mlp) require(hidden_dim >= 1, ErrorKind::Domain, "model: mlp needs hidden units");
  }

  void check_data(const Dataset& data) const {
    require(data.dim() == input_dim, ErrorKind::Dimension,
            "model expects " + std::to_string(input_dim) + " features, dataset '" + data.name + "' has " +
                std::to_string(data.dim()));
    require(data.classes == classes, ErrorKind::Dimension, "model and dataset disagree on class count");
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Model parameters plus training metadata. `weight_decay` is the L2
/// coefficient of the training objective, folded into each per-example loss.
struct Checkpoint {
  ModelSpec spec;
  Vector theta;
  std::uint64_t epoch = 0;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;

  void validate() const {
    spec.validate();
    require(theta.size() == spec.parameter_count(), ErrorKind::Dimension, "checkpoint: theta length mismatch");
    require(theta.allFinite(), ErrorKind::Domain, "checkpoint: theta has non-finite entries");
  }
};

inline constexpr double kProbabilityClamp = 1e-12;

struct ForwardResult {
  double loss = 0.0;         // cross-entropy, -ln p
  double probability = 0.0;  // correct-class probability, clamped
  double output = 0.0;       // f = ln(p / (1 - p)) on the clamped p
  bool saturated = false;    // p hit a clamp bound
};

struct OutputGradient {
  Vector grad;
  bool saturated = false;
};

/// Whether per-example gradients include the weight-decay share wd·θ.
enum class Penalty { Include, Exclude };

namespace detail {

using RowMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using MutRowMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

struct Layers {
  RowMap w1;
  Eigen::Map<const Vector> b1;
  RowMap w2;
  Eigen::Map<const Vector> b2;
};

inline Layers mlp_layers(const ModelSpec& s, const double* theta) {
  const auto h = s.hidden_dim, d = s.input_dim, k = s.classes;
  return Layers{RowMap(theta, h, d), Eigen::Map<const Vector>(theta + h * d, h), RowMap(theta + h * d + h, k, h),
                Eigen::Map<const Vector>(theta + h * d + h + k * h, k)};
}

struct Forward {
  Matrix hidden;  // b×h (mlp only)
  Matrix logits;  // b×K
};

inline Forward forward(const ModelSpec& s, const Vector& theta, const Eigen::Ref<const Matrix>& x) {
  Forward out;
  if (s.kind == ModelKind::LogisticRegression) {
    out.logits = x * RowMap(theta.data(), s.classes, s.input_dim).transpose();
  } else {
    const Layers l = mlp_layers(s, theta.data());
    out.hidden = ((x * l.w1.transpose()).rowwise() + l.b1.transpose()).array().tanh();
    out.logits = (out.hidden * l.w2.transpose()).rowwise() + l.b2.transpose();
  }
  return out;
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix s = logits.colwise() - logits.rowwise().maxCoeff();
  s = s.array().exp();
  s.array().colwise() /= s.rowwise().sum().array();
  return s;
}

inline double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& z, Eigen::Index skip = -1) {
  double m = -std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < z.size(); ++k)
    if (k != skip) m = std::max(m, z(k));
  double acc = 0.0;
  for (Eigen::Index k = 0; k < z.size(); ++k)
    if (k != skip) acc += std::exp(z(k) - m);
  return m + std::log(acc);
}

/// Mean gradient over the batch of the scalar whose logit-gradient rows are `dz`.
inline Vector backprop_mean(const ModelSpec& s, const Vector& theta, const Eigen::Ref<const Matrix>& x,
                            const Forward& fwd, const Matrix& dz) {
  const double inv_b = 1.0 / static_cast<double>(x.rows());
  Vector g(s.parameter_count());
  if (s.kind == ModelKind::LogisticRegression) {
    MutRowMap(g.data(), s.classes, s.input_dim) = inv_b * dz.transpose() * x;
    return g;
  }
  const auto h = s.hidden_dim, d = s.input_dim, k = s.classes;
  const Layers l = mlp_layers(s, theta.data());
  const Matrix dhidden = ((dz * l.w2).array() * (1.0 - fwd.hidden.array().square())).matrix();
  MutRowMap(g.data(), h, d) = inv_b * dhidden.transpose() * x;
  g.segment(h * d, h) = inv_b * dhidden.colwise().sum().transpose();
  MutRowMap(g.data() + h * d + h, k, h) = inv_b * dz.transpose() * fwd.hidden;
  g.segment(h * d + h + k * h, k) = inv_b * dz.colwise().sum().transpose();
  return g;
}

/// One gradient row per example for the scalars whose logit-gradient rows are `dz`.
inline Matrix backprop_rows(const ModelSpec& s, const Vector& theta, const Eigen::Ref<const Matrix>& x,
                            const Forward& fwd, const Matrix& dz) {
  const Eigen::Index b = x.rows();
  Matrix rows(b, s.parameter_count());
  if (s.kind == ModelKind::LogisticRegression) {
    for (Eigen::Index i = 0; i < b; ++i)
      for (Eigen::Index c = 0; c < s.classes; ++c)
        rows.row(i).segment(c * s.input_dim, s.input_dim) = dz(i, c) * x.row(i);
    return rows;
  }
  const auto h = s.hidden_dim, d = s.input_dim, k = s.classes;
  const Layers l = mlp_layers(s, theta.data());
  const Matrix dhidden = ((dz * l.w2).array() * (1.0 - fwd.hidden.array().square())).matrix();
  for (Eigen::Index i = 0; i < b; ++i) {
    auto row = rows.row(i);
    for (Eigen::Index u = 0; u < h; ++u) row.segment(u * d, d) = dhidden(i, u) * x.row(i);
    row.segment(h * d, h) = dhidden.row(i);
    for (Eigen::Index c = 0; c < k; ++c) row.segment(h * d + h + c * h, h) = dz(i, c) * fwd.hidden.row(i);
    row.segment(h * d + h + k * h, k) = dz.row(i);
  }
  return rows;
}

inline Matrix loss_logit_grads(const Matrix& probs, std::span<const int> labels) {
  Matrix dz = probs;
  for (Eigen::Index i = 0; i < dz.rows(); ++i) dz(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
  return dz;
}

/// Logit gradient of f = z_y - lse_{k≠y}(z): e_y minus the softmax over the other classes.
inline Matrix output_logit_grads(const Matrix& logits, std::span<const int> labels) {
  Matrix dz = Matrix::Zero(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    const double lse_other = log_sum_exp(logits.row(i), y);
    for (Eigen::Index k = 0; k < logits.cols(); ++k)
      dz(i, k) = (k == y) ? 1.0 : -std::exp(logits(i, k) - lse_other);
  }
  return dz;
}

inline void check_example(const ModelSpec& s, Eigen::Index dim, int label) {
  require(dim == s.input_dim, ErrorKind::Domain,
          "example has " + std::to_string(dim) + " features, model expects " + std::to_string(s.input_dim));
  require(label >= 0 && label < s.classes, ErrorKind::Domain, "example label out of range");
}

}  // namespace detail

/// Cross-entropy L, clamped correct-class probability p = e^-L, and log-odds f.
inline ForwardResult forward_eval(const Checkpoint& ckpt, const Eigen::Ref<const Vector>& x, int label) {
  detail::check_example(ckpt.spec, x.size(), label);
  const auto fwd = detail::forward(ckpt.spec, ckpt.theta, x.transpose());
  const Eigen::RowVectorXd z = fwd.logits.row(0);
  ForwardResult r;
  r.loss = std::max(detail::log_sum_exp(z) - z(label), 0.0);
  const double raw_p = std::exp(-r.loss);
  const double f_raw = z(label) - detail::log_sum_exp(z, label);
  const double f_bound = std::log((1.0 - kProbabilityClamp) / kProbabilityClamp);
  r.saturated = raw_p < kProbabilityClamp || raw_p > 1.0 - kProbabilityClamp || std::abs(f_raw) > f_bound;
  r.probability = std::clamp(raw_p, kProbabilityClamp, 1.0 - kProbabilityClamp);
  r.output = r.saturated ? std::log(r.probability / (1.0 - r.probability)) : f_raw;
  return r;
}

/// Model outputs f(z, θ) for every example in `data`.
inline Vector model_outputs(const Checkpoint& ckpt, const Dataset& data) {
  Vector f(data.size());
  for (Eigen::Index i = 0; i < data.size(); ++i)
    f(i) = forward_eval(ckpt, data.features.row(i).transpose(), data.labels[static_cast<std::size_t>(i)]).output;
  return f;
}

/// Correct-class probabilities (clamped) for every example.
inline Vector model_probabilities(const Checkpoint& ckpt, const Dataset& data) {
  Vector p(data.size());
  for (Eigen::Index i = 0; i < data.size(); ++i)
    p(i) = forward_eval(ckpt, data.features.row(i).transpose(), data.labels[static_cast<std::size_t>(i)]).probability;
  return p;
}

/// Rows ∇L(z_i, θ)ᵀ of the per-example loss gradient matrix J (n×p).
inline Matrix per_example_grads(const Checkpoint& ckpt, const Dataset& data, Penalty penalty = Penalty::Include) {
  ckpt.spec.check_data(data);
  const auto fwd = detail::forward(ckpt.spec, ckpt.theta, data.features);
  Matrix rows = detail::backprop_rows(ckpt.spec, ckpt.theta, data.features, fwd,
                                      detail::loss_logit_grads(detail::softmax_rows(fwd.logits), data.labels));
  if (penalty == Penalty::Include && ckpt.weight_decay != 0.0)
    rows.rowwise() += ckpt.weight_decay * ckpt.theta.transpose();
  return rows;
}

/// ∇f(z, θ) for one example. Equals -∇L/(1-p) with L the cross-entropy; at
/// the probability clamp that formula is applied with the clamped p.
inline OutputGradient grad_output_f(const Checkpoint& ckpt, const Eigen::Ref<const Vector>& x, int label) {
  detail::check_example(ckpt.spec, x.size(), label);
  const Matrix xrow = x.transpose();
  const auto fwd = detail::forward(ckpt.spec, ckpt.theta, xrow);
  const auto r = forward_eval(ckpt, x, label);
  const std::span<const int> labels(&label, 1);
  OutputGradient out;
  out.saturated = r.saturated;
  if (!r.saturated) {
    out.grad = detail::backprop_rows(ckpt.spec, ckpt.theta, xrow, fwd, detail::output_logit_grads(fwd.logits, labels))
                   .row(0)
                   .transpose();
  } else {
    const Matrix dz = detail::loss_logit_grads(detail::softmax_rows(fwd.logits), labels);
    out.grad = -detail::backprop_rows(ckpt.spec, ckpt.theta, xrow, fwd, dz).row(0).transpose() / (1.0 - r.probability);
  }
  return out;
}

/// Rows ∇f(z_i, θ)ᵀ of the output-gradient matrix Φ.
inline Matrix output_grads(const Checkpoint& ckpt, const Dataset& data) {
  ckpt.spec.check_data(data);
  const auto fwd = detail::forward(ckpt.spec, ckpt.theta, data.features);
  Matrix rows = detail::backprop_rows(ckpt.spec, ckpt.theta, data.features, fwd,
                                      detail::output_logit_grads(fwd.logits, data.labels));
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    const int label = data.labels[static_cast<std::size_t>(i)];
    const Vector x = data.features.row(i).transpose();
    if (forward_eval(ckpt, x, label).saturated) rows.row(i) = grad_output_f(ckpt, x, label).grad.transpose();
  }
  return rows;
}

/// Regularized empirical risk R(θ) = mean CE + (wd/2)‖θ‖².
inline double objective_value(const ModelSpec& spec, const Vector& theta, const Dataset& data, double weight_decay) {
  const auto fwd = detail::forward(spec, theta, data.features);
  double total = 0.0;
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    const int y = data.labels[static_cast<std::size_t>(i)];
    total += detail::log_sum_exp(fwd.logits.row(i)) - fwd.logits(i, y);
  }
  return total / static_cast<double>(data.size()) + 0.5 * weight_decay * theta.squaredNorm();
}

/// ∇R(θ), the mean of the per-example loss gradients.
inline Vector objective_gradient(const ModelSpec& spec, const Vector& theta, const Dataset& data,
                                 double weight_decay) {
  const auto fwd = detail::forward(spec, theta, data.features);
  const Matrix dz = detail::loss_logit_grads(detail::softmax_rows(fwd.logits), data.labels);
  Vector g = detail::backprop_mean(spec, theta, data.features, fwd, dz);
  if (weight_decay != 0.0) g += weight_decay * theta;
  return g;
}

/// Hessian-vector product ∇²R(θ)·v by forward-over-reverse differentiation.
inline Vector hessian_vector_product(const ModelSpec& spec, const Vector& theta, const Dataset& data,
                                     double weight_decay, const Eigen::Ref<const Vector>& v) {
  require(v.size() == spec.parameter_count(), ErrorKind::Dimension, "hvp: direction has wrong length");
  const auto& x = data.features;
  const double inv_b = 1.0 / static_cast<double>(data.size());
  const auto fwd = detail::forward(spec, theta, x);
  const Matrix probs = detail::softmax_rows(fwd.logits);
  auto softmax_jvp = [&](const Matrix& rz) {
    Matrix rs = probs.cwiseProduct(rz);
    const Vector dots = rs.rowwise().sum();
    rs -= probs.cwiseProduct(dots.replicate(1, probs.cols()));
    return rs;
  };

  Vector out(spec.parameter_count());
  if (spec.kind == ModelKind::LogisticRegression) {
    const Matrix rz = x * detail::RowMap(v.data(), spec.classes, spec.input_dim).transpose();
    detail::MutRowMap(out.data(), spec.classes, spec.input_dim) = inv_b * softmax_jvp(rz).transpose() * x;
  } else {
    const auto h = spec.hidden_dim, d = spec.input_dim, k = spec.classes;
    const detail::Layers l = detail::mlp_layers(spec, theta.data());
    const detail::Layers dv = detail::mlp_layers(spec, v.data());
    const Matrix& hid = fwd.hidden;
    const Matrix deriv = (1.0 - hid.array().square()).matrix();
    const Matrix ra = (x * dv.w1.transpose()).rowwise() + dv.b1.transpose();
    const Matrix rh = deriv.cwiseProduct(ra);
    const Matrix rz = ((rh * l.w2.transpose() + hid * dv.w2.transpose()).rowwise() + dv.b2.transpose());
    const Matrix dz = detail::loss_logit_grads(probs, data.labels);
    const Matrix rdz = softmax_jvp(rz);
    const Matrix back = dz * l.w2;
    const Matrix rdh = (rdz * l.w2 + dz * dv.w2).cwiseProduct(deriv) -
                       2.0 * back.cwiseProduct(hid).cwiseProduct(rh);
    detail::MutRowMap(out.data(), h, d) = inv_b * rdh.transpose() * x;
    out.segment(h * d, h) = inv_b * rdh.colwise().sum().transpose();
    detail::MutRowMap(out.data() + h * d + h, k, h) = inv_b * (rdz.transpose() * hid + dz.transpose() * rh);
    out.segment(h * d + h + k * h, k) = inv_b * rdz.colwise().sum().transpose();
  }
  if (weight_decay != 0.0) out += weight_decay * v;
  return out;
}

/// Dense Hessian of R restricted to parameter indices [offset, p). Closed form
/// for logistic regression; assembled column by column from HVPs for the MLP.
inline Matrix objective_hessian(const ModelSpec& spec, const Vector& theta, const Dataset& data, double weight_decay,
                                Eigen::Index offset = 0) {
  const Eigen::Index p = spec.parameter_count();
  require(offset >= 0 && offset < p, ErrorKind::Domain, "hessian: offset out of range");
  const Eigen::Index m = p - offset;
  Matrix hess(m, m);
  if (spec.kind == ModelKind::LogisticRegression) {
    const auto d = spec.input_dim, k = spec.classes;
    const auto& x = data.features;
    const Matrix probs = detail::softmax_rows(detail::forward(spec, theta, x).logits);
    const double inv_n = 1.0 / static_cast<double>(data.size());
    Matrix full(p, p);
    for (Eigen::Index a = 0; a < k; ++a) {
      for (Eigen::Index b = a; b < k; ++b) {
        Vector w = -probs.col(a).cwiseProduct(probs.col(b));
        if (a == b) w += probs.col(a);
        const Matrix block = inv_n * x.transpose() * w.asDiagonal() * x;
        full.block(a * d, b * d, d, d) = block;
        full.block(b * d, a * d, d, d) = block.transpose();
      }
    }
    full.diagonal().array() += weight_decay;
    hess = full.bottomRightCorner(m, m);
  } else {
    Vector e = Vector::Zero(p);
    for (Eigen::Index j = 0; j < m; ++j) {
      e(offset + j) = 1.0;
      hess.col(j) = hessian_vector_product(spec, theta, data, weight_decay, e).tail(m);
      e(offset + j) = 0.0;
    }
    hess = 0.5 * (hess + hess.transpose()).eval();
  }
  return hess;
}

/// Parameter initialization: zeros for logistic regression, scaled Gaussian
/// weights (1/sqrt(fan_in)) and zero biases for the MLP.
inline Vector initial_parameters(const ModelSpec& spec, SeededRng rng) {
  Vector theta = Vector::Zero(spec.parameter_count());
  if (spec.kind == ModelKind::LogisticRegression) return theta;
  const auto h = spec.hidden_dim, d = spec.input_dim, k = spec.classes;
  const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(h));
  for (Eigen::Index i = 0; i < h * d; ++i) theta(i) = s1 * rng.normal();
  for (Eigen::Index i = 0; i < k * h; ++i) theta(h * d + h + i) = s2 * rng.normal();
  return theta;
}

}  // namespace attune
