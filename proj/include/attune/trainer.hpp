#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "attune/error.hpp"
#include "attune/linalg.hpp"
#include "attune/matrix_io.hpp"
#include "attune/model.hpp"
#include "attune/parallel.hpp"
#include "attune/rng.hpp"

namespace attune {

enum class Optimizer { Sgd, SgdMomentum };
enum class InitMode { Warm, Cold };

inline const char* to_string(Optimizer o) { return o == Optimizer::Sgd ? "sgd" : "sgd-momentum"; }
inline const char* to_string(InitMode m) { return m == InitMode::Warm ? "warm" : "cold"; }

inline Optimizer parse_optimizer(const std::string& s) {
  if (s == "sgd") return Optimizer::Sgd;
  if (s == "sgd-momentum") return Optimizer::SgdMomentum;
  fail(ErrorKind::Config, "unknown optimizer '" + s + "' (expected sgd or sgd-momentum)");
}

inline InitMode parse_init_mode(const std::string& s) {
  if (s == "warm") return InitMode::Warm;
  if (s == "cold") return InitMode::Cold;
  fail(ErrorKind::Config, "unknown init mode '" + s + "' (expected warm or cold)");
}

/// Optimizer settings. batch_size = 0 means full batch. `tolerance` is the
/// full-gradient 2-norm target of the logistic-regression Newton refinement;
/// MLPs train for exactly `epochs` epochs. `init` applies to subset retrains.
struct TrainConfig {
  Optimizer optimizer = Optimizer::Sgd;
  double learning_rate = 0.1;
  std::uint64_t epochs = 10;
  std::uint64_t batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  double tolerance = 1e-8;
  std::uint64_t max_newton_steps = 100;
  std::uint64_t seed = 0;
  InitMode init = InitMode::Warm;

  void validate() const {
    require(learning_rate > 0 && std::isfinite(learning_rate), ErrorKind::Config, "train: learning rate must be > 0");
    require(epochs >= 1, ErrorKind::Config, "train: epochs must be >= 1");
    require(weight_decay >= 0, ErrorKind::Config, "train: weight decay must be >= 0");
    require(momentum >= 0 && momentum < 1, ErrorKind::Config, "train: momentum must lie in [0, 1)");
    require(tolerance > 0, ErrorKind::Config, "train: tolerance must be > 0");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct TrainResult {
  Checkpoint final;
  std::vector<Checkpoint> series;   // one per epoch when requested
  std::vector<double> learning_rates;  // aligned with series
  std::vector<double> epoch_loss;   // full-data objective after each epoch
  double gradient_norm = 0.0;
  std::uint64_t newton_steps = 0;
};

namespace detail {

inline constexpr std::uint64_t kInitStream = 0x1001;
inline constexpr std::uint64_t kShuffleStream = 0x1002;
inline constexpr std::uint64_t kPlanStream = 0x1003;
inline constexpr std::uint64_t kSubsetSeedStream = 0x1004;

/// Damped Newton on the strongly convex logistic objective.
inline std::uint64_t newton_refine(const ModelSpec& spec, Vector& theta, const Dataset& data, const TrainConfig& cfg,
                                   double& grad_norm) {
  std::uint64_t steps = 0;
  Vector g = objective_gradient(spec, theta, data, cfg.weight_decay);
  grad_norm = g.norm();
  double value = objective_value(spec, theta, data, cfg.weight_decay);
  while (grad_norm >= cfg.tolerance && steps < cfg.max_newton_steps) {
    Matrix h = objective_hessian(spec, theta, data, cfg.weight_decay);
    Vector dir = h.ldlt().solve(g);
    if (!dir.allFinite() || dir.dot(g) <= 0) {
      h.diagonal().array() += 1e-8 * (1.0 + h.diagonal().cwiseAbs().maxCoeff());
      dir = h.ldlt().solve(g);
    }
    require(dir.allFinite(), ErrorKind::Conditioning, "train: Newton direction is not finite");
    double t = 1.0;
    Vector next = theta - dir;
    double next_value = objective_value(spec, next, data, cfg.weight_decay);
    Vector next_g = objective_gradient(spec, next, data, cfg.weight_decay);
    // Near the optimum the objective stops resolving decreases, so a shrinking
    // gradient is accepted as progress too.
    while (!(next_value <= value - 1e-4 * t * g.dot(dir)) && !(next_g.norm() < grad_norm) && t > 1e-12) {
      t *= 0.5;
      next = theta - t * dir;
      next_value = objective_value(spec, next, data, cfg.weight_decay);
      next_g = objective_gradient(spec, next, data, cfg.weight_decay);
    }
    theta = std::move(next);
    value = next_value;
    g = std::move(next_g);
    grad_norm = g.norm();
    ++steps;
  }
  return steps;
}

}  // namespace detail

/// Trains `spec` on `data` from `init` (or the seed-derived initialization).
/// Logistic regression is refined by Newton steps until ‖∇R‖ < tolerance.
inline TrainResult train(const Dataset& data, const ModelSpec& spec, const TrainConfig& cfg,
                         const Vector* init = nullptr, bool keep_series = false) {
  cfg.validate();
  spec.validate();
  data.validate();
  spec.check_data(data);

  Vector theta = init ? *init : initial_parameters(spec, SeededRng(cfg.seed, detail::kInitStream));
  require(theta.size() == spec.parameter_count(), ErrorKind::Dimension, "train: initial parameters have wrong length");
  Vector velocity = Vector::Zero(theta.size());

  const auto n = static_cast<std::size_t>(data.size());
  const std::size_t batch = cfg.batch_size == 0 ? n : std::min<std::size_t>(cfg.batch_size, n);
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  TrainResult result;
  result.epoch_loss.reserve(cfg.epochs);
  for (std::uint64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (batch < n) SeededRng(cfg.seed, detail::kShuffleStream).split(epoch).shuffle(std::span(order));
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t len = std::min(batch, n - start);
      const Vector g = len == n ? objective_gradient(spec, theta, data, cfg.weight_decay)
                                : objective_gradient(spec, theta, data.subset(std::span(order).subspan(start, len)),
                                                     cfg.weight_decay);
      if (cfg.optimizer == Optimizer::SgdMomentum) {
        velocity = cfg.momentum * velocity + g;
        theta -= cfg.learning_rate * velocity;
      } else {
        theta -= cfg.learning_rate * g;
      }
    }
    const double loss = objective_value(spec, theta, data, cfg.weight_decay);
    if (!std::isfinite(loss) || !theta.allFinite())
      fail(ErrorKind::Divergence,
           "train: loss became non-finite at epoch " + std::to_string(epoch) + "; lower the learning rate");
    result.epoch_loss.push_back(loss);
    if (keep_series) {
      result.series.push_back(Checkpoint{spec, theta, epoch, cfg.seed, cfg.weight_decay});
      result.learning_rates.push_back(cfg.learning_rate);
    }
  }

  if (spec.kind == ModelKind::LogisticRegression) {
    result.newton_steps = detail::newton_refine(spec, theta, data, cfg, result.gradient_norm);
    if (result.gradient_norm >= cfg.tolerance)
      fail(ErrorKind::Conditioning, "train: gradient norm " + std::to_string(result.gradient_norm) +
                                        " did not reach tolerance; increase weight decay");
  } else {
    result.gradient_norm = objective_gradient(spec, theta, data, cfg.weight_decay).norm();
  }
  result.final = Checkpoint{spec, std::move(theta), cfg.epochs, cfg.seed, cfg.weight_decay};
  return result;
}

/// s index sets of size a over [0, n), each sorted ascending.
struct SubsetPlan {
  Eigen::Index n = 0;
  Eigen::Index a = 0;
  std::uint64_t seed = 0;
  bool exhaustive = false;
  std::vector<std::vector<Eigen::Index>> subsets;

  std::size_t size() const noexcept { return subsets.size(); }

  void validate() const {
    require(a >= 1 && a <= n, ErrorKind::Domain, "subset plan: need 1 <= a <= n");
    for (const auto& s : subsets) {
      require(static_cast<Eigen::Index>(s.size()) == a, ErrorKind::Domain, "subset plan: subset of wrong size");
      for (std::size_t i = 0; i < s.size(); ++i) {
        require(s[i] >= 0 && s[i] < n, ErrorKind::Domain, "subset plan: index out of range");
        require(i == 0 || s[i - 1] < s[i], ErrorKind::Domain, "subset plan: indices must be sorted and distinct");
      }
    }
  }
};

/// Independent uniform draws of size-a subsets (partial Fisher-Yates per subset).
inline SubsetPlan sample_subsets(Eigen::Index n, Eigen::Index a, std::size_t s, std::uint64_t seed) {
  require(a >= 1 && a <= n, ErrorKind::Domain,
          "sample_subsets: subset size " + std::to_string(a) + " outside [1, " + std::to_string(n) + "]");
  require(s >= 1, ErrorKind::Domain, "sample_subsets: need at least one subset");
  SubsetPlan plan{n, a, seed, false, {}};
  plan.subsets.reserve(s);
  std::vector<Eigen::Index> pool(static_cast<std::size_t>(n));
  for (std::size_t j = 0; j < s; ++j) {
    std::iota(pool.begin(), pool.end(), Eigen::Index{0});
    SeededRng rng = SeededRng(seed, detail::kPlanStream).split(j);
    for (Eigen::Index i = 0; i < a; ++i) {
      const auto k = i + static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(n - i)));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(k)]);
    }
    std::vector<Eigen::Index> subset(pool.begin(), pool.begin() + a);
    std::sort(subset.begin(), subset.end());
    plan.subsets.push_back(std::move(subset));
  }
  return plan;
}

inline double binomial(Eigen::Index n, Eigen::Index k) {
  if (k < 0 || k > n) return 0.0;
  double c = 1.0;
  for (Eigen::Index i = 1; i <= k; ++i) c = c * static_cast<double>(n - k + i) / static_cast<double>(i);
  return std::round(c);
}

/// Every size-a subset of [0, n) in lexicographic order.
inline SubsetPlan exhaustive_plan(Eigen::Index n, Eigen::Index a, double max_subsets = 1e6) {
  require(a >= 1 && a <= n, ErrorKind::Domain, "exhaustive_plan: need 1 <= a <= n");
  require(binomial(n, a) <= max_subsets, ErrorKind::Capability, "exhaustive_plan: too many subsets to enumerate");
  SubsetPlan plan{n, a, 0, true, {}};
  std::vector<Eigen::Index> cur(static_cast<std::size_t>(a));
  std::iota(cur.begin(), cur.end(), Eigen::Index{0});
  while (true) {
    plan.subsets.push_back(cur);
    Eigen::Index i = a - 1;
    while (i >= 0 && cur[static_cast<std::size_t>(i)] == n - a + i) --i;
    if (i < 0) break;
    ++cur[static_cast<std::size_t>(i)];
    for (Eigen::Index j = i + 1; j < a; ++j) cur[static_cast<std::size_t>(j)] = cur[static_cast<std::size_t>(j - 1)] + 1;
  }
  return plan;
}

/// Retrained models for a plan and their outputs f(z', θ*_A) on a test set.
struct SubsetOutputs {
  SubsetPlan plan;
  std::vector<Checkpoint> checkpoints;
  Matrix outputs;  // s × |T|
};

struct RetrainOptions {
  const Vector* warm_start = nullptr;  // required when cfg.init is warm
  bool seed_per_subset = true;         // false: every subset reuses cfg.seed
  std::size_t workers = default_workers();
  // Optional model store: lookup(j, cfg) returns a previously trained model for
  // subset j under cfg (seed already derived); store(j, cfg, model) records one.
  std::function<std::optional<Checkpoint>(std::size_t, const TrainConfig&)> lookup;
  std::function<void(std::size_t, const TrainConfig&, const Checkpoint&)> store;
};

/// Seed used for subset j's initialization and shuffling.
inline std::uint64_t subset_seed(std::uint64_t master, std::size_t j) {
  return SeededRng(master, detail::kSubsetSeedStream).split(j).next_u64();
}

inline SubsetOutputs retrain_subsets(const Dataset& data, const ModelSpec& spec, const TrainConfig& cfg,
                                     const SubsetPlan& plan, const Dataset& test, const RetrainOptions& opt = {}) {
  require(plan.n == data.size(), ErrorKind::Dimension, "retrain: plan size does not match the training set");
  plan.validate();
  spec.check_data(test);
  if (cfg.init == InitMode::Warm)
    require(opt.warm_start != nullptr, ErrorKind::Config, "retrain: warm start requested without base parameters");

  SubsetOutputs out;
  out.plan = plan;
  out.checkpoints.resize(plan.size());
  out.outputs.resize(static_cast<Eigen::Index>(plan.size()), test.size());
  parallel_for(plan.size(), opt.workers, [&](std::size_t j) {
    TrainConfig sub = cfg;
    if (opt.seed_per_subset) sub.seed = subset_seed(cfg.seed, j);
    try {
      std::optional<Checkpoint> model = opt.lookup ? opt.lookup(j, sub) : std::nullopt;
      if (!model) {
        TrainResult r = train(data.subset(plan.subsets[j]), spec, sub,
                              cfg.init == InitMode::Warm ? opt.warm_start : nullptr);
        counters().retrains.fetch_add(1);
        if (opt.store) opt.store(j, sub, r.final);
        model = std::move(r.final);
      }
      out.outputs.row(static_cast<Eigen::Index>(j)) = model_outputs(*model, test).transpose();
      out.checkpoints[j] = std::move(*model);
    } catch (const Error& e) {
      fail(e.kind(), "subset " + std::to_string(j) + ": " + e.what());
    }
  });
  require(out.outputs.allFinite(), ErrorKind::Domain, "retrain: non-finite subset outputs");
  return out;
}

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

/// ATCK layout: "ATCK", u32 version, u32 header length, JSON header, u64
/// parameter count, little-endian f64 parameters.
inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
  c.validate();
  const nlohmann::json header = {{"kind", to_string(c.spec.kind)},
                                 {"input_dim", c.spec.input_dim},
                                 {"hidden_dim", c.spec.hidden_dim},
                                 {"classes", c.spec.classes},
                                 {"epoch", c.epoch},
                                 {"seed", c.seed},
                                 {"weight_decay", c.weight_decay}};
  const std::string text = header.dump();
  os.write("ATCK", 4);
  detail::write_pod(os, kCheckpointFormatVersion);
  detail::write_pod(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::write_pod(os, static_cast<std::uint64_t>(c.theta.size()));
  os.write(reinterpret_cast<const char*>(c.theta.data()), static_cast<std::streamsize>(c.theta.size() * sizeof(double)));
}

inline Checkpoint read_checkpoint(std::istream& is) {
  detail::expect_magic(is, "ATCK");
  const auto version = detail::read_pod<std::uint32_t>(is, "ATCK version");
  if (version != kCheckpointFormatVersion)
    throw FormatError(FormatCode::VersionMismatch, "unsupported ATCK version " + std::to_string(version));
  const auto header_len = detail::read_pod<std::uint32_t>(is, "ATCK header length");
  if (header_len > (1u << 20)) throw FormatError(FormatCode::Malformed, "implausible ATCK header length");
  std::string text(header_len, '\0');
  is.read(text.data(), header_len);
  if (is.gcount() != static_cast<std::streamsize>(header_len))
    throw FormatError(FormatCode::LengthMismatch, "truncated ATCK header");
  Checkpoint c;
  try {
    const auto h = nlohmann::json::parse(text);
    c.spec.kind = parse_model_kind(h.at("kind").get<std::string>());
    c.spec.input_dim = h.at("input_dim").get<Eigen::Index>();
    c.spec.hidden_dim = h.at("hidden_dim").get<Eigen::Index>();
    c.spec.classes = h.at("classes").get<Eigen::Index>();
    c.epoch = h.at("epoch").get<std::uint64_t>();
    c.seed = h.at("seed").get<std::uint64_t>();
    c.weight_decay = h.at("weight_decay").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatCode::Malformed, std::string("bad ATCK header: ") + e.what());
  } catch (const Error& e) {
    throw FormatError(FormatCode::Malformed, std::string("bad ATCK header: ") + e.what());
  }
  const auto count = detail::read_pod<std::uint64_t>(is, "ATCK parameter count");
  if (count != static_cast<std::uint64_t>(c.spec.parameter_count()))
    throw FormatError(FormatCode::LengthMismatch, "ATCK parameter count does not match the model spec");
  c.theta.resize(static_cast<Eigen::Index>(count));
  const auto bytes = static_cast<std::streamsize>(count * sizeof(double));
  is.read(reinterpret_cast<char*>(c.theta.data()), bytes);
  if (is.gcount() != bytes) throw FormatError(FormatCode::LengthMismatch, "truncated ATCK payload");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  auto os = detail::open_out(path);
  write_checkpoint(os, c);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  return read_checkpoint(is);
}

}  // namespace attune
