#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "attune/data.hpp"
#include "attune/error.hpp"
#include "attune/lambda_select.hpp"
#include "attune/model.hpp"
#include "attune/trainer.hpp"

namespace attune {

using nlohmann::json;

namespace detail {

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::string suggestion(std::string_view key, const std::vector<std::string>& allowed) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (const auto& k : allowed) {
    const std::size_t d = edit_distance(key, k);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  if (best.empty() || best_d > std::max<std::size_t>(2, key.size() / 3)) return {};
  return " (did you mean '" + best + "'?)";
}

/// Typed, path-aware access to one JSON object that rejects unknown keys.
class Section {
 public:
  Section(const json& j, std::string path, std::vector<std::string> allowed) : j_(j), path_(std::move(path)) {
    require(j.is_object(), ErrorKind::Config, where() + "expected an object");
    for (const auto& [key, value] : j.items()) {
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
        fail(ErrorKind::Config, "unknown key '" + prefix() + key + "'" + suggestion(key, allowed));
    }
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }
  const json& at(const std::string& key) const { return j_.at(key); }
  std::string key_path(const std::string& key) const { return prefix() + key; }

  void require_key(const std::string& key) const {
    require(j_.contains(key), ErrorKind::Config, "missing required key '" + prefix() + key + "'");
  }

  double number(const std::string& key, double def) const {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    require(v.is_number(), ErrorKind::Config, "'" + key_path(key) + "' must be a number");
    const double x = v.get<double>();
    require(std::isfinite(x), ErrorKind::Config, "'" + key_path(key) + "' must be finite");
    return x;
  }

  std::uint64_t count(const std::string& key, std::uint64_t def) const {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    require(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0), ErrorKind::Config,
            "'" + key_path(key) + "' must be a non-negative integer");
    return v.get<std::uint64_t>();
  }

  bool boolean(const std::string& key, bool def) const {
    if (!has(key)) return def;
    require(j_.at(key).is_boolean(), ErrorKind::Config, "'" + key_path(key) + "' must be true or false");
    return j_.at(key).get<bool>();
  }

  std::string string(const std::string& key, const std::string& def) const {
    if (!has(key)) return def;
    require(j_.at(key).is_string(), ErrorKind::Config, "'" + key_path(key) + "' must be a string");
    return j_.at(key).get<std::string>();
  }

 private:
  std::string prefix() const { return path_.empty() ? "" : path_ + "."; }
  std::string where() const { return path_.empty() ? "config: " : "'" + path_ + "': "; }

  const json& j_;
  std::string path_;
};

}  // namespace detail

struct DatasetConfig {
  std::optional<std::string> path;       // on-disk training set (save_dataset layout)
  std::optional<std::string> test_path;  // on-disk validation set
  SyntheticSpec synthetic;
};

/// Attributor id plus every hyperparameter it accepts. Keys that do not apply
/// to the chosen id are rejected at parse time.
struct AttributorConfig {
  std::string id = "iffim";
  std::optional<double> regularization;  // nullopt: the surrogate-selected λ̂
  std::optional<Eigen::Index> projection_dim;
  bool with_r = false;
  std::uint64_t max_iteration = 10;
  double scaling = 5.0;
  std::uint64_t recursion_depth = 1000;
  std::uint64_t batch_size = 50;
  bool normalize = false;
  std::uint64_t checkpoints = 10;
  bool last_layer = false;
  std::optional<std::uint64_t> training_epoch;  // nullopt: final parameters

  /// Curvature-context attributors support λ grids, ξ̄ and λ̂.
  bool spectral() const { return id == "iffim" || id == "iffim-projected" || id == "trak"; }

  json to_json() const;
};

inline const std::vector<std::string>& attributor_ids() {
  static const std::vector<std::string> ids = {"iffim", "iffim-projected", "trak", "if-explicit", "if-cg", "if-lissa",
                                               "tracin"};
  return ids;
}

inline std::vector<std::string> attributor_keys(const std::string& id) {
  if (id == "iffim") return {"id", "regularization", "training_epoch"};
  if (id == "iffim-projected") return {"id", "regularization", "projection_dim", "training_epoch"};
  if (id == "trak") return {"id", "regularization", "projection_dim", "with_r", "training_epoch"};
  if (id == "if-explicit") return {"id", "regularization", "last_layer", "training_epoch"};
  if (id == "if-cg") return {"id", "regularization", "max_iteration", "training_epoch"};
  if (id == "if-lissa") return {"id", "regularization", "scaling", "recursion_depth", "batch_size", "training_epoch"};
  if (id == "tracin") return {"id", "normalize", "checkpoints", "projection_dim"};
  fail(ErrorKind::Config, "unknown attributor '" + id + "'" + detail::suggestion(id, attributor_ids()));
}

inline constexpr Eigen::Index kDefaultProjectionDim = 512;

inline AttributorConfig parse_attributor(const json& j, const std::string& path = "attributor") {
  require(j.is_object(), ErrorKind::Config, "'" + path + "' must be an object");
  AttributorConfig a;
  if (j.contains("id")) {
    require(j.at("id").is_string(), ErrorKind::Config, "'" + path + ".id' must be a string");
    a.id = j.at("id").get<std::string>();
  }
  const detail::Section s(j, path, attributor_keys(a.id));

  // Defaults by attributor.
  if (a.id == "trak") {
    a.regularization = 0.0;
    a.projection_dim = kDefaultProjectionDim;
  } else if (a.id == "iffim-projected") {
    a.projection_dim = kDefaultProjectionDim;
  } else if (a.id == "if-explicit") {
    a.regularization = 1e-5;
  } else if (a.id == "if-cg") {
    a.regularization = 1e-2;
  } else if (a.id == "if-lissa") {
    a.regularization = 1e-3;
  }

  if (s.has("regularization")) {
    const json& r = s.at("regularization");
    if (r.is_string()) {
      require(r.get<std::string>() == "selected", ErrorKind::Config,
              "'" + s.key_path("regularization") + "' must be a number or \"selected\"");
      require(a.spectral(), ErrorKind::Config,
              "'" + s.key_path("regularization") + "': \"selected\" needs iffim, iffim-projected or trak");
      a.regularization.reset();
    } else {
      const double v = s.number("regularization", 0.0);
      require(v >= 0.0, ErrorKind::Config, "'" + s.key_path("regularization") + "' must be >= 0");
      a.regularization = v;
    }
  }
  if (j.contains("projection_dim")) {
    if (j.at("projection_dim").is_null()) {
      require(a.id != "iffim-projected", ErrorKind::Config, "'" + s.key_path("projection_dim") + "' is required for iffim-projected");
      a.projection_dim.reset();
    } else {
      const auto p = s.count("projection_dim", 0);
      require(p >= 1, ErrorKind::Config, "'" + s.key_path("projection_dim") + "' must be >= 1");
      a.projection_dim = static_cast<Eigen::Index>(p);
    }
  }
  a.with_r = s.boolean("with_r", a.with_r);
  a.max_iteration = s.count("max_iteration", a.max_iteration);
  a.scaling = s.number("scaling", a.scaling);
  a.recursion_depth = s.count("recursion_depth", a.recursion_depth);
  a.batch_size = s.count("batch_size", a.batch_size);
  a.normalize = s.boolean("normalize", a.normalize);
  a.checkpoints = s.count("checkpoints", a.checkpoints);
  a.last_layer = s.boolean("last_layer", a.last_layer);
  if (s.has("training_epoch") && s.at("training_epoch") != "final") {
    a.training_epoch = s.count("training_epoch", 0);
    require(*a.training_epoch >= 1, ErrorKind::Config, "'" + s.key_path("training_epoch") + "' must be >= 1");
  }

  require(a.max_iteration >= 1, ErrorKind::Config, "'" + s.key_path("max_iteration") + "' must be >= 1");
  require(a.scaling > 0.0, ErrorKind::Config, "'" + s.key_path("scaling") + "' must be > 0");
  require(a.checkpoints >= 1, ErrorKind::Config, "'" + s.key_path("checkpoints") + "' must be >= 1");
  if ((a.id == "iffim" || a.id == "iffim-projected" || a.id == "if-cg") && a.regularization)
    require(*a.regularization > 0.0, ErrorKind::Config, "'" + s.key_path("regularization") + "' must be > 0 for " + a.id);
  return a;
}

inline json AttributorConfig::to_json() const {
  json j = {{"id", id}};
  for (const auto& key : attributor_keys(id)) {
    if (key == "regularization") j[key] = regularization ? json(*regularization) : json("selected");
    else if (key == "projection_dim") j[key] = projection_dim ? json(*projection_dim) : json(nullptr);
    else if (key == "with_r") j[key] = with_r;
    else if (key == "max_iteration") j[key] = max_iteration;
    else if (key == "scaling") j[key] = scaling;
    else if (key == "recursion_depth") j[key] = recursion_depth;
    else if (key == "batch_size") j[key] = batch_size;
    else if (key == "normalize") j[key] = normalize;
    else if (key == "checkpoints") j[key] = checkpoints;
    else if (key == "last_layer") j[key] = last_layer;
    else if (key == "training_epoch") j[key] = training_epoch ? json(*training_epoch) : json("final");
  }
  return j;
}

struct SubsetConfig {
  double fraction = 0.5;
  std::uint64_t count = 50;
  std::optional<std::uint64_t> seed;  // defaults to the run seed
};

/// "auto" (spectrum-anchored, `points` log-spaced values) or an explicit list.
struct GridConfig {
  bool automatic = true;
  std::size_t points = kAutoGridPoints;
  std::vector<double> values;
  json raw = "auto";
};

struct SweepAxis {
  std::string name;
  std::vector<json> values;  // "grid" as the only regularization value expands the λ grid
};

struct RunConfig {
  DatasetConfig dataset;
  ModelKind model = ModelKind::LogisticRegression;
  Eigen::Index hidden_dim = 64;
  TrainConfig train;
  AttributorConfig attributor;
  SubsetConfig subsets;
  GridConfig grid;
  double threshold = kDefaultThreshold;
  Eigen::Index validation_size = 64;
  std::string output_dir = "attune-out";
  std::uint64_t seed = 0;
  std::size_t workers = 0;  // 0: all hardware threads
  std::vector<SweepAxis> sweep;

  std::size_t worker_count() const { return workers == 0 ? default_workers() : workers; }
  std::uint64_t subset_seed() const { return subsets.seed.value_or(seed); }

  /// Every setting after defaults, plus the fixed conventions the run relies on.
  json to_json() const;
};

inline TrainConfig parse_train(const json& j, ModelKind model) {
  const detail::Section s(j, "train",
                          {"optimizer", "learning_rate", "epochs", "batch_size", "momentum", "weight_decay", "tolerance",
                           "max_newton_steps", "init"});
  TrainConfig t;
  t.epochs = 50;
  t.init = model == ModelKind::LogisticRegression ? InitMode::Warm : InitMode::Cold;
  t.optimizer = parse_optimizer(s.string("optimizer", to_string(t.optimizer)));
  t.learning_rate = s.number("learning_rate", t.learning_rate);
  t.epochs = s.count("epochs", t.epochs);
  t.batch_size = s.count("batch_size", t.batch_size);
  t.momentum = s.number("momentum", t.momentum);
  t.weight_decay = s.number("weight_decay", t.weight_decay);
  t.tolerance = s.number("tolerance", t.tolerance);
  t.max_newton_steps = s.count("max_newton_steps", t.max_newton_steps);
  t.init = parse_init_mode(s.string("init", to_string(t.init)));
  t.validate();
  return t;
}

inline GridConfig parse_grid(const json& j) {
  GridConfig g;
  g.raw = j;
  if (j.is_string()) {
    require(j.get<std::string>() == "auto", ErrorKind::Config, "'lambda_grid' must be \"auto\", a list, or {\"points\": N}");
    return g;
  }
  if (j.is_array()) {
    g.automatic = false;
    require(!j.empty(), ErrorKind::Config, "'lambda_grid' list is empty");
    for (const auto& v : j) {
      require(v.is_number() && v.get<double>() > 0.0 && std::isfinite(v.get<double>()), ErrorKind::Config,
              "'lambda_grid' values must be positive numbers");
      g.values.push_back(v.get<double>());
    }
    std::sort(g.values.begin(), g.values.end());
    g.values.erase(std::unique(g.values.begin(), g.values.end()), g.values.end());
    g.points = g.values.size();
    return g;
  }
  const detail::Section s(j, "lambda_grid", {"points"});
  g.points = s.count("points", g.points);
  require(g.points >= 2, ErrorKind::Config, "'lambda_grid.points' must be >= 2");
  return g;
}

inline std::vector<std::string> sweep_axis_names() {
  return {"regularization", "projection_dim", "training_epoch", "with_r", "max_iteration", "scaling",
          "recursion_depth", "batch_size",    "normalize",      "checkpoints", "last_layer"};
}

inline std::vector<SweepAxis> parse_sweep(const json& j, const AttributorConfig& base) {
  const detail::Section s(j, "sweep", {"axes"});
  std::vector<SweepAxis> axes;
  if (!s.has("axes")) return axes;
  require(s.at("axes").is_array(), ErrorKind::Config, "'sweep.axes' must be a list");
  std::set<std::string> seen;
  for (std::size_t k = 0; k < s.at("axes").size(); ++k) {
    const std::string path = "sweep.axes[" + std::to_string(k) + "]";
    const detail::Section ax(s.at("axes")[k], path, {"name", "values"});
    ax.require_key("name");
    ax.require_key("values");
    SweepAxis a;
    a.name = ax.string("name", "");
    const auto names = sweep_axis_names();
    require(std::find(names.begin(), names.end(), a.name) != names.end(), ErrorKind::Config,
            "unknown sweep axis '" + a.name + "'" + detail::suggestion(a.name, names));
    require(seen.insert(a.name).second, ErrorKind::Config, "sweep axis '" + a.name + "' listed twice");
    const auto allowed = attributor_keys(base.id);
    require(std::find(allowed.begin(), allowed.end(), a.name) != allowed.end(), ErrorKind::Config,
            "sweep axis '" + a.name + "' does not apply to attributor " + base.id);
    const json& vals = ax.at("values");
    if (vals.is_string() && vals.get<std::string>() == "grid") {
      require(a.name == "regularization" && base.spectral(), ErrorKind::Config,
              "'" + path + ".values': \"grid\" applies only to regularization of iffim, iffim-projected or trak");
      a.values.push_back(vals);
    } else {
      require(vals.is_array() && !vals.empty(), ErrorKind::Config, "'" + path + ".values' must be a non-empty list");
      for (const auto& v : vals) {
        // Validate each value against the attributor parser before any work.
        json probe = base.to_json();
        probe[a.name] = v;
        parse_attributor(probe, path);
        a.values.push_back(v);
      }
    }
    axes.push_back(std::move(a));
  }
  return axes;
}

inline RunConfig parse_config(const json& j) {
  const detail::Section top(j, "",
                            {"dataset", "model", "train", "attributor", "subsets", "lambda_grid", "threshold",
                             "validation_size", "output_dir", "seed", "workers", "sweep"});
  top.require_key("dataset");
  top.require_key("model");
  RunConfig c;

  const detail::Section ds(top.at("dataset"), "dataset", {"synthetic", "path", "test_path"});
  require(ds.has("synthetic") != ds.has("path"), ErrorKind::Config,
          "'dataset' needs exactly one of 'synthetic' or 'path'");
  if (ds.has("path")) {
    c.dataset.path = ds.string("path", "");
    if (ds.has("test_path")) c.dataset.test_path = ds.string("test_path", "");
  } else {
    require(!ds.has("test_path"), ErrorKind::Config, "'dataset.test_path' applies only to on-disk data");
    const detail::Section syn(ds.at("synthetic"), "dataset.synthetic", {"n", "d", "classes", "separation", "noise"});
    SyntheticSpec& sp = c.dataset.synthetic;
    sp.n = static_cast<Eigen::Index>(syn.count("n", static_cast<std::uint64_t>(sp.n)));
    sp.d = static_cast<Eigen::Index>(syn.count("d", static_cast<std::uint64_t>(sp.d)));
    sp.classes = static_cast<Eigen::Index>(syn.count("classes", static_cast<std::uint64_t>(sp.classes)));
    sp.separation = syn.number("separation", sp.separation);
    sp.noise = syn.number("noise", sp.noise);
    require(sp.n >= 4, ErrorKind::Config, "'dataset.synthetic.n' must be >= 4");
    require(sp.d >= 1, ErrorKind::Config, "'dataset.synthetic.d' must be >= 1");
    require(sp.classes >= 2, ErrorKind::Config, "'dataset.synthetic.classes' must be >= 2");
    require(sp.separation >= 0.0, ErrorKind::Config, "'dataset.synthetic.separation' must be >= 0");
    require(sp.noise > 0.0, ErrorKind::Config, "'dataset.synthetic.noise' must be > 0");
  }

  const detail::Section md(top.at("model"), "model", {"kind", "hidden_dim"});
  md.require_key("kind");
  c.model = parse_model_kind(md.string("kind", ""));
  if (md.has("hidden_dim")) {
    require(c.model == ModelKind::Mlp, ErrorKind::Config, "'model.hidden_dim' applies only to mlp");
    c.hidden_dim = static_cast<Eigen::Index>(md.count("hidden_dim", 64));
    require(c.hidden_dim >= 1, ErrorKind::Config, "'model.hidden_dim' must be >= 1");
  }

  c.train = parse_train(top.has("train") ? top.at("train") : json::object(), c.model);
  c.attributor = parse_attributor(top.has("attributor") ? top.at("attributor") : json::object());
  if (top.has("lambda_grid")) c.grid = parse_grid(top.at("lambda_grid"));

  if (top.has("subsets")) {
    const detail::Section sb(top.at("subsets"), "subsets", {"fraction", "count", "seed"});
    c.subsets.fraction = sb.number("fraction", c.subsets.fraction);
    c.subsets.count = sb.count("count", c.subsets.count);
    if (sb.has("seed")) c.subsets.seed = sb.count("seed", 0);
  }
  require(c.subsets.fraction > 0.0 && c.subsets.fraction < 1.0, ErrorKind::Config,
          "'subsets.fraction' must lie strictly between 0 and 1");
  require(c.subsets.count >= 3, ErrorKind::Config, "'subsets.count' must be >= 3");

  c.threshold = top.number("threshold", c.threshold);
  require(c.threshold >= kMinThreshold && c.threshold <= kMaxThreshold, ErrorKind::Config,
          "'threshold' must lie in [0.4, 0.6]");
  c.validation_size = static_cast<Eigen::Index>(top.count("validation_size", static_cast<std::uint64_t>(c.validation_size)));
  require(c.validation_size >= 1, ErrorKind::Config, "'validation_size' must be >= 1");
  c.output_dir = top.string("output_dir", c.output_dir);
  require(!c.output_dir.empty(), ErrorKind::Config, "'output_dir' must not be empty");
  c.seed = top.count("seed", c.seed);
  c.workers = static_cast<std::size_t>(top.count("workers", c.workers));
  if (top.has("sweep")) c.sweep = parse_sweep(top.at("sweep"), c.attributor);
  return c;
}

inline RunConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Config, std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline RunConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(is.good(), ErrorKind::Config, "cannot read config file " + path.string());
  const std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

inline json train_to_json(const TrainConfig& t) {
  return {{"optimizer", to_string(t.optimizer)},
          {"learning_rate", t.learning_rate},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"tolerance", t.tolerance},
          {"max_newton_steps", t.max_newton_steps},
          {"seed", t.seed},
          {"init", to_string(t.init)}};
}

inline json RunConfig::to_json() const {
  json ds;
  if (dataset.path) {
    ds["path"] = *dataset.path;
    ds["test_path"] = dataset.test_path ? json(*dataset.test_path) : json(nullptr);
  } else {
    const auto& s = dataset.synthetic;
    ds["synthetic"] = {{"n", s.n}, {"d", s.d}, {"classes", s.classes}, {"separation", s.separation}, {"noise", s.noise}};
  }
  json model_j = {{"kind", to_string(model)}};
  if (model == ModelKind::Mlp) model_j["hidden_dim"] = hidden_dim;
  json axes = json::array();
  for (const auto& a : sweep) axes.push_back({{"name", a.name}, {"values", a.values}});
  TrainConfig t = train;
  t.seed = seed;
  return {{"dataset", ds},
          {"model", model_j},
          {"train", train_to_json(t)},
          {"attributor", attributor.to_json()},
          {"subsets", {{"fraction", subsets.fraction}, {"count", subsets.count}, {"seed", subset_seed()}}},
          {"lambda_grid", grid.raw},
          {"threshold", threshold},
          {"validation_size", validation_size},
          {"seed", seed},
          {"sweep", {{"axes", axes}}},
          {"conventions",
           {{"projection_family", "gaussian N(0, 1/p~)"},
            {"lissa_sampling", "with-replacement"},
            {"rank_ties", "average"},
            {"undefined_spearman", "excluded-and-counted"},
            {"selection_tie_break", "smaller-lambda"},
            {"degenerate_ratio", kDegenerateRatio},
            {"subset_retrain_init", to_string(train.init)}}}};
}

}  // namespace attune
