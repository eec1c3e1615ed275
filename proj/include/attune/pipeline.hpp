#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "attune/attributors.hpp"
#include "attune/cache.hpp"
#include "attune/config.hpp"
#include "attune/curvature.hpp"
#include "attune/data.hpp"
#include "attune/evaluation.hpp"
#include "attune/hash.hpp"
#include "attune/lambda_select.hpp"
#include "attune/model.hpp"
#include "attune/report.hpp"
#include "attune/trainer.hpp"

namespace attune {

inline constexpr std::uint64_t kProjectionStream = 0x4001;
inline constexpr std::uint64_t kLissaStream = 0x4002;
inline constexpr int kQuantilePercents[] = {10, 30, 50, 70, 90};

/// Curvature context of a spectral attributor plus its right weights and the
/// test-set output gradients it scores against.
struct SpectralState {
  TrakContext context;  // beta = 1 for the Fisher attributors
  Matrix test_grads;
  std::vector<SpectralWeights> weights;
  std::string checkpoint_hash;
  std::optional<Eigen::Index> projection_dim;  // applied sketch size, if any
};

/// Lazily computes and memoizes everything a run needs: data, the full
/// model, subset retrains (through the retrain cache), curvature contexts and
/// attributions. All getters are safe to call from several threads.
class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg, RetrainCache* cache = nullptr) : cfg_(std::move(cfg)), cache_(cache) {}

  const RunConfig& config() const noexcept { return cfg_; }
  RetrainCache* cache() const noexcept { return cache_; }

  const Dataset& train_set() {
    load_data();
    return *train_;
  }

  const Dataset& test_set() {
    load_data();
    return *test_;
  }

  const std::string& data_hash() {
    load_data();
    return data_hash_;
  }

  ModelSpec model_spec() {
    const Dataset& d = train_set();
    ModelSpec s;
    s.kind = cfg_.model;
    s.input_dim = d.dim();
    s.classes = d.classes;
    if (s.kind == ModelKind::Mlp) s.hidden_dim = cfg_.hidden_dim;
    return s;
  }

  /// Full-data training config (seed = run seed).
  TrainConfig train_config() const {
    TrainConfig t = cfg_.train;
    t.seed = cfg_.seed;
    return t;
  }

  /// Full-data model with its per-epoch series; read from or written to the cache.
  const TrainResult& full_model() {
    std::lock_guard lock(mutex_);
    if (full_) return *full_;
    const std::string key = full_model_key();
    if (cache_) {
      if (auto bytes = cache_->get(key)) {
        try {
          full_ = decode_full(*bytes);
          return *full_;
        } catch (const Error& e) {
          std::cerr << Error(ErrorKind::Cache, std::string("undecodable entry: ") + e.what()).what() << '\n';
        }
      }
    }
    full_ = train(train_set(), model_spec(), train_config(), nullptr, true);
    if (cache_) cache_->put(key, encode_full(*full_));
    return *full_;
  }

  /// Parameters used for attribution: the final model or the SGD iterate after `epoch`.
  Checkpoint checkpoint_at(std::optional<std::uint64_t> epoch) {
    const TrainResult& r = full_model();
    if (!epoch) return r.final;
    require(*epoch >= 1 && *epoch <= r.series.size(), ErrorKind::Config,
            "training_epoch " + std::to_string(*epoch) + " outside [1, " + std::to_string(r.series.size()) + "]");
    return r.series[*epoch - 1];
  }

  Eigen::Index subset_size() {
    const auto n = static_cast<double>(train_set().size());
    const auto a = static_cast<Eigen::Index>(std::llround(cfg_.subsets.fraction * n));
    require(a >= 1 && a < train_set().size(), ErrorKind::Config,
            "subsets.fraction gives subset size " + std::to_string(a) + " for n = " + std::to_string(train_set().size()));
    return a;
  }

  const SubsetPlan& plan() {
    std::lock_guard lock(mutex_);
    if (!plan_) plan_ = sample_subsets(train_set().size(), subset_size(), cfg_.subsets.count, cfg_.subset_seed());
    return *plan_;
  }

  /// Retrained models on the plan; every model goes through the retrain cache.
  const SubsetOutputs& subset_outputs() {
    std::lock_guard lock(mutex_);
    if (!outputs_) outputs_ = retrain(plan());
    return *outputs_;
  }

  /// Retrains (or fetches) every subset of an arbitrary plan.
  SubsetOutputs retrain(const SubsetPlan& p) {
    TrainConfig sub = cfg_.train;
    sub.seed = cfg_.subset_seed();
    RetrainOptions opt;
    opt.workers = cfg_.worker_count();
    Vector warm;
    std::string warm_hash = "cold";
    if (sub.init == InitMode::Warm) {
      warm = full_model().final.theta;
      warm_hash = vector_hash(warm);
      opt.warm_start = &warm;
    }
    const ModelSpec spec = model_spec();
    const std::string dhash = data_hash();
    if (cache_) {
      opt.lookup = [&](std::size_t j, const TrainConfig& c) -> std::optional<Checkpoint> {
        const auto bytes = cache_->get(subset_key(dhash, spec, c, p.subsets[j], warm_hash));
        if (!bytes) return std::nullopt;
        try {
          auto cs = decode_checkpoints(*bytes);
          if (cs.size() == 1 && cs[0].spec == spec) return std::move(cs[0]);
        } catch (const Error&) {
        }
        std::cerr << Error(ErrorKind::Cache, "undecodable subset entry; recomputing").what() << '\n';
        return std::nullopt;
      };
      opt.store = [&](std::size_t j, const TrainConfig& c, const Checkpoint& model) {
        cache_->put(subset_key(dhash, spec, c, p.subsets[j], warm_hash), encode_checkpoints({model}));
      };
    }
    return retrain_subsets(train_set(), spec, sub, p, test_set(), opt);
  }

  /// Sketch size actually applied: none when the request is at least p.
  std::optional<Eigen::Index> effective_projection(const AttributorConfig& a) {
    if (!a.projection_dim) return std::nullopt;
    const Eigen::Index p = model_spec().parameter_count();
    if (*a.projection_dim >= p) return std::nullopt;
    return a.projection_dim;
  }

  std::optional<Matrix> projection(const AttributorConfig& a) {
    const auto dim = effective_projection(a);
    if (!dim) return std::nullopt;
    return make_projection(model_spec().parameter_count(), *dim, SeededRng(cfg_.seed, kProjectionStream));
  }

  /// One eigendecomposition per (attributor family, checkpoint, sketch); reused for every λ.
  const SpectralState& spectral(const AttributorConfig& a) {
    require(a.spectral(), ErrorKind::Config, "attributor " + a.id + " has no curvature spectrum");
    const bool is_trak = a.id == "trak";
    const auto dim = effective_projection(a);
    const std::string key = std::string(is_trak ? (a.with_r ? "trak-r" : "trak") : "fim") + "|" +
                            (a.training_epoch ? std::to_string(*a.training_epoch) : "final") + "|" +
                            (dim ? std::to_string(*dim) : "none");
    std::lock_guard lock(mutex_);
    if (auto it = spectral_.find(key); it != spectral_.end()) return *it->second;
    const Checkpoint ckpt = checkpoint_at(a.training_epoch);
    auto state = std::make_unique<SpectralState>(SpectralState{
        is_trak ? trak_context(ckpt, train_set(), a.with_r, projection(a))
                : TrakContext{fim_context(ckpt, train_set(), projection(a)), Vector::Ones(train_set().size()), false},
        output_grads(ckpt, test_set()), {}, checkpoint_hash(ckpt), dim});
    state->weights = spectral_weights(state->context.curvature, Eigen::Ref<const Matrix>(state->test_grads));
    return *spectral_.emplace(key, std::move(state)).first->second;
  }

  /// The configured candidate grid against this attributor's spectrum.
  GridSpec grid(const AttributorConfig& a) {
    if (!cfg_.grid.automatic) return explicit_grid(cfg_.grid.values);
    return auto_grid(spectral(a).context.curvature.eig(), cfg_.grid.points);
  }

  nlohmann::json grid_json(const GridSpec& g) const {
    nlohmann::json j = g.to_json();
    j["spec"] = cfg_.grid.raw;
    j["values"] = g.values;
    return j;
  }

  SurrogateReport surrogate(const AttributorConfig& a, const std::vector<double>& grid) {
    const SpectralState& s = spectral(a);
    SurrogateReport r;
    r.grid = grid;
    r.threshold = cfg_.threshold;
    r.xi.resize(s.test_grads.rows(), static_cast<Eigen::Index>(grid.size()));
    for (std::size_t k = 0; k < grid.size(); ++k) {
      const XiBar xb = xi_bar(s.weights, grid[k]);
      r.xi.col(static_cast<Eigen::Index>(k)) = xb.xi;
      r.xi_bar.push_back(xb.value);
      r.skipped.push_back(xb.skipped);
    }
    r.selected = select_index(grid, r.xi_bar, cfg_.threshold);
    r.lambda_hat = grid[r.selected];
    return r;
  }

  std::vector<QuantilePoint> quantiles(const AttributorConfig& a) {
    const auto spectrum = nonzero_spectrum(spectral(a).context.curvature.eig());
    std::vector<QuantilePoint> out;
    for (int q : kQuantilePercents) out.push_back({q, spectrum_quantile(spectrum, q), std::nullopt, std::nullopt});
    return out;
  }

  /// The configured λ, or λ̂ on the configured grid when "selected".
  double resolve_lambda(const AttributorConfig& a) {
    if (a.regularization) return *a.regularization;
    return surrogate(a, grid(a).values).lambda_hat;
  }

  AttributionMatrix attribute(const AttributorConfig& a, std::optional<double> lambda = std::nullopt,
                              std::optional<std::size_t> workers = std::nullopt) {
    const std::size_t w = workers.value_or(cfg_.worker_count());
    AttributionMatrix out;
    if (a.spectral()) {
      const SpectralState& s = spectral(a);
      const double l = lambda ? *lambda : resolve_lambda(a);
      out = a.id == "trak" ? trak(s.context, s.test_grads, l) : iffim(s.context.curvature, s.test_grads, l);
      out.attributor = a.id;
      out.checkpoint_hash = s.checkpoint_hash;
      out.hyperparams["selected"] = !lambda && !a.regularization;
    } else if (a.id == "tracin") {
      const TrainResult& r = full_model();
      const std::size_t k = std::min<std::size_t>(a.checkpoints, r.series.size());
      std::vector<Checkpoint> series(r.series.end() - static_cast<std::ptrdiff_t>(k), r.series.end());
      const std::vector<double> lrs(k, cfg_.train.learning_rate);
      out = tracin(series, lrs, train_set(), test_set(), a.normalize, projection(a));
    } else {
      const Checkpoint ckpt = checkpoint_at(a.training_epoch);
      const double l = lambda ? *lambda : *a.regularization;
      if (a.id == "if-explicit") {
        out = if_explicit(ckpt, train_set(), test_set(), l, a.last_layer);
      } else if (a.id == "if-cg") {
        out = if_cg(ckpt, train_set(), test_set(), l, a.max_iteration, w);
      } else if (a.id == "if-lissa") {
        out = if_lissa(ckpt, train_set(), test_set(), l,
                       LissaParams{a.scaling, a.recursion_depth, a.batch_size, SeededRng(cfg_.seed, kLissaStream).next_u64()},
                       w);
      } else {
        fail(ErrorKind::Config, "unknown attributor '" + a.id + "'");
      }
    }
    if (a.projection_dim && !effective_projection(a)) out.hyperparams["projection_skipped"] = true;
    if (a.id != "tracin") out.hyperparams["training_epoch"] = a.training_epoch ? nlohmann::json(*a.training_epoch) : "final";
    return out;
  }

  LdsReport evaluate(const AttributionMatrix& attr) { return lds(attr, subset_outputs()); }

 private:
  static std::string vector_hash(const Vector& v) {
    return Sha256().update(v.data(), static_cast<std::size_t>(v.size()) * sizeof(double)).hex();
  }

  static nlohmann::json spec_json(const ModelSpec& s) {
    return {{"kind", to_string(s.kind)}, {"input_dim", s.input_dim}, {"hidden_dim", s.hidden_dim}, {"classes", s.classes}};
  }

  std::string full_model_key() {
    return Sha256()
        .update("attune-full-v1|")
        .update(data_hash())
        .update(spec_json(model_spec()).dump())
        .update(train_to_json(train_config()).dump())
        .hex();
  }

  static std::string subset_key(const std::string& dhash, const ModelSpec& spec, const TrainConfig& c, const std::vector<Eigen::Index>& indices,
                         const std::string& warm_hash) {
    Sha256 h;
    h.update("attune-subset-v1|").update(dhash).update(spec_json(spec).dump()).update(train_to_json(c).dump());
    h.update(warm_hash);
    const auto count = static_cast<std::uint64_t>(indices.size());
    h.update(&count, sizeof count);
    h.update(indices.data(), indices.size() * sizeof(Eigen::Index));
    return h.hex();
  }

  static std::string encode_full(const TrainResult& r) {
    const nlohmann::json meta = {{"epoch_loss", r.epoch_loss},
                                 {"learning_rates", r.learning_rates},
                                 {"gradient_norm", r.gradient_norm},
                                 {"newton_steps", r.newton_steps}};
    std::ostringstream os;
    const std::string text = meta.dump();
    const auto len = static_cast<std::uint64_t>(text.size());
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os << text;
    std::vector<Checkpoint> all = r.series;
    all.push_back(r.final);
    os << encode_checkpoints(all);
    return os.str();
  }

  static TrainResult decode_full(const std::string& bytes) {
    require(bytes.size() >= 8, ErrorKind::Cache, "short model bundle");
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data(), sizeof len);
    require(len <= bytes.size() - 8, ErrorKind::Cache, "bad model bundle header");
    TrainResult r;
    try {
      const auto meta = nlohmann::json::parse(bytes.substr(8, len));
      r.epoch_loss = meta.at("epoch_loss").get<std::vector<double>>();
      r.learning_rates = meta.at("learning_rates").get<std::vector<double>>();
      r.gradient_norm = meta.at("gradient_norm").get<double>();
      r.newton_steps = meta.at("newton_steps").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Cache, std::string("bad model bundle metadata: ") + e.what());
    }
    auto all = decode_checkpoints(bytes.substr(8 + len));
    require(!all.empty(), ErrorKind::Cache, "empty model bundle");
    r.final = std::move(all.back());
    all.pop_back();
    r.series = std::move(all);
    return r;
  }

  void load_data() {
    std::lock_guard lock(mutex_);
    if (train_) return;
    const auto& dc = cfg_.dataset;
    if (dc.path) {
      Dataset all = load_dataset(*dc.path);
      if (dc.test_path) {
        train_ = std::move(all);
        test_ = load_dataset(*dc.test_path);
      } else {
        const Eigen::Index t = cfg_.validation_size;
        require(all.size() > t + 1, ErrorKind::Config, "dataset has too few rows to split off the validation set");
        std::vector<Eigen::Index> head(static_cast<std::size_t>(all.size() - t)), tail(static_cast<std::size_t>(t));
        std::iota(head.begin(), head.end(), Eigen::Index{0});
        std::iota(tail.begin(), tail.end(), all.size() - t);
        train_ = all.subset(head);
        test_ = all.subset(tail);
      }
      require(train_->dim() == test_->dim() && train_->classes == test_->classes, ErrorKind::Config,
              "training and validation sets disagree on shape");
    } else {
      auto [tr, te] = synthetic_blobs(dc.synthetic, cfg_.validation_size, cfg_.seed);
      train_ = std::move(tr);
      test_ = std::move(te);
    }
    data_hash_ = dataset_hash(*train_);
  }

  RunConfig cfg_;
  RetrainCache* cache_ = nullptr;
  std::recursive_mutex mutex_;
  std::optional<Dataset> train_;
  std::optional<Dataset> test_;
  std::string data_hash_;
  std::optional<TrainResult> full_;
  std::optional<SubsetPlan> plan_;
  std::optional<SubsetOutputs> outputs_;
  std::map<std::string, std::unique_ptr<SpectralState>> spectral_;
};

// ---------------------------------------------------------------------------
// Oracle diagnostic on exhaustive convex instances

/// Theorem-condition check at one (test point, λ): the oracle ratio against ξ,
/// the exhaustive population Pearson LDS c_p, and its central difference in λ.
struct DiagnosticRow {
  Eigen::Index test_index = 0;
  double lambda = 0.0;
  ConditionDiagnostic diagnostic;
  double r = 0.0;
  double cp = std::numeric_limits<double>::quiet_NaN();
  double dcp_dlambda = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline double population_cp(const Matrix& agg, const SubsetOutputs& outs, Eigen::Index t) {
  const Vector f = outs.outputs.col(t);
  const Vector pred = agg.col(t);
  if (is_constant(f) || is_constant(pred)) return std::numeric_limits<double>::quiet_NaN();
  return brute_force_pearson(f, pred).correlation();
}

}  // namespace detail

/// `exhaustive` must hold every size-a subset of the training set, retrained.
/// The derivative uses c_p at λ·ratio and λ/ratio.
inline std::vector<DiagnosticRow> theorem_diagnostic(const Checkpoint& full, const Dataset& data, const Dataset& test,
                                                     const SubsetOutputs& exhaustive, const std::vector<double>& grid,
                                                     double step_ratio = 1.05) {
  require(exhaustive.plan.exhaustive, ErrorKind::Domain, "diagnostic: needs an exhaustive subset plan");
  require(step_ratio > 1.0, ErrorKind::Domain, "diagnostic: step ratio must exceed 1");
  const CurvatureContext ctx(per_example_grads(full, data), std::nullopt, SolveMode::Dual);
  const Matrix g = output_grads(full, test);
  std::vector<AlphaResult> alphas;
  for (Eigen::Index t = 0; t < test.size(); ++t) alphas.push_back(alpha_vector(exhaustive, t));

  std::vector<DiagnosticRow> rows;
  for (double lambda : grid) {
    const double up = lambda * step_ratio, down = lambda / step_ratio;
    const Matrix agg = aggregate_scores(iffim(ctx, g, lambda).scores, exhaustive.plan);
    const Matrix agg_up = aggregate_scores(iffim(ctx, g, up).scores, exhaustive.plan);
    const Matrix agg_down = aggregate_scores(iffim(ctx, g, down).scores, exhaustive.plan);
    for (Eigen::Index t = 0; t < test.size(); ++t) {
      DiagnosticRow row;
      row.test_index = t;
      row.lambda = lambda;
      const Vector grad = g.row(t).transpose();
      const TValues tv = t_values(ctx, grad, lambda);
      if (tv.degenerate) {
        rows.push_back(row);
        continue;
      }
      const OracleQuantities oq = oracle_lhs(ctx, alphas[static_cast<std::size_t>(t)].alpha, grad, lambda);
      row.diagnostic = sufficient_condition_diagnostic(oq, tv);
      row.r = oq.r;
      row.cp = detail::population_cp(agg, exhaustive, t);
      row.dcp_dlambda = (detail::population_cp(agg_up, exhaustive, t) - detail::population_cp(agg_down, exhaustive, t)) /
                        (up - down);
      rows.push_back(row);
    }
  }
  return rows;
}

inline std::string diagnostic_csv(const std::vector<DiagnosticRow>& rows) {
  std::string out = std::string(kDiagnoseHeader) + "\n";
  for (const auto& r : rows)
    out += std::to_string(r.test_index) + "," + format_number(r.lambda) + "," + format_number(r.diagnostic.lhs) + "," +
           format_number(r.diagnostic.rhs) + "," + to_string(r.diagnostic.condition) + "," + format_number(r.r) + "," +
           format_number(r.cp) + "," + format_number(r.dcp_dlambda) + "\n";
  return out;
}

}  // namespace attune
