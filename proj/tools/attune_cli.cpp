#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "attune/attributors.hpp"
#include "attune/cache.hpp"
#include "attune/config.hpp"
#include "attune/error.hpp"
#include "attune/pipeline.hpp"
#include "attune/report.hpp"
#include "attune/sweep.hpp"

namespace fs = std::filesystem;
using namespace attune;

namespace {

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> workers;
  bool no_cache = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", args.seed, "Master seed (overrides the config's \"seed\")");
  cmd->add_option("--out", args.out, "Output directory (overrides \"output_dir\")");
  cmd->add_option("--workers", args.workers, "Worker threads (0 = all hardware threads)");
  cmd->add_flag("--no-cache", args.no_cache, "Bypass the retrain cache");
}

struct Context {
  RunConfig cfg;
  fs::path out;
  std::optional<RetrainCache> cache;

  explicit Context(const CommonArgs& args) : cfg(parse_config_file(args.config)) {
    if (args.seed) cfg.seed = *args.seed;
    if (args.workers) cfg.workers = *args.workers;
    out = args.out ? fs::path(*args.out) : fs::path(cfg.output_dir);
    if (!args.no_cache) cache.emplace(RetrainCache::default_dir());
    fs::create_directories(out);
    write_json(out / "resolved_config.json", cfg.to_json());
  }

  RetrainCache* cache_ptr() { return cache ? &*cache : nullptr; }

  void report_counters(std::ostream& os) const {
    os << "retrains: " << counters().retrains.load() << "\n"
       << "eigendecompositions: " << counters().eigendecompositions.load() << "\n";
    if (cache) os << "cache hits: " << cache->hits() << "\ncache misses: " << cache->misses() << "\n";
  }
};

int cmd_gen_data(const CommonArgs& args) {
  Context ctx(args);
  Pipeline p(ctx.cfg, ctx.cache_ptr());
  save_dataset(ctx.out / "data" / "train.atrm", p.train_set());
  save_dataset(ctx.out / "data" / "test.atrm", p.test_set());
  std::cout << "wrote " << p.train_set().size() << " training and " << p.test_set().size() << " validation points\n";
  return 0;
}

int cmd_train(const CommonArgs& args) {
  Context ctx(args);
  Pipeline p(ctx.cfg, ctx.cache_ptr());
  const TrainResult& r = p.full_model();
  save_checkpoint(ctx.out / "model.atck", r.final);
  write_json(ctx.out / "train_report.json",
             {{"schema_version", kReportSchemaVersion},
              {"epochs", r.epoch_loss.size()},
              {"epoch_loss", r.epoch_loss},
              {"final_gradient_norm", r.gradient_norm},
              {"newton_steps", r.newton_steps},
              {"parameters", r.final.theta.size()},
              {"checkpoint_hash", checkpoint_hash(r.final)}});
  std::cout << "final gradient norm " << format_number(r.gradient_norm) << "\n";
  return 0;
}

int cmd_retrain(const CommonArgs& args) {
  Context ctx(args);
  Pipeline p(ctx.cfg, ctx.cache_ptr());
  const SubsetOutputs& outs = p.subset_outputs();
  save_matrix(ctx.out / "subsets" / "outputs.atrm", outs.outputs);
  write_json(ctx.out / "subsets" / "plan.json", {{"schema_version", kReportSchemaVersion},
                                                 {"n", outs.plan.n},
                                                 {"a", outs.plan.a},
                                                 {"s", outs.plan.size()},
                                                 {"seed", outs.plan.seed},
                                                 {"subsets", outs.plan.subsets}});
  ctx.report_counters(std::cout);
  return 0;
}

int cmd_attribute(const CommonArgs& args) {
  Context ctx(args);
  Pipeline p(ctx.cfg, ctx.cache_ptr());
  const AttributionMatrix a = p.attribute(ctx.cfg.attributor);
  save_attribution(ctx.out / "attribution.atrm", a);
  std::cout << "attribution " << a.scores.rows() << " x " << a.scores.cols() << " (" << a.attributor << ")\n";
  return 0;
}

int cmd_evaluate_lds(const CommonArgs& args) {
  Context ctx(args);
  Pipeline p(ctx.cfg, ctx.cache_ptr());
  const AttributionMatrix a = p.attribute(ctx.cfg.attributor);
  const LdsReport r = p.evaluate(a);
  write_text(ctx.out / "lds_report.csv", lds_report_csv(r));
  nlohmann::json summary = lds_summary_json(r);
  summary["lambda"] = a.hyperparams.contains("lambda") ? a.hyperparams["lambda"] : nlohmann::json(nullptr);
  write_json(ctx.out / "lds_summary.json", summary);
  std::cout << "LDS " << format_number(r.mean) << " +/- " << format_number(r.standard_error) << " (" << r.excluded_count()
            << " excluded)\n";
  ctx.report_counters(std::cout);
  return 0;
}

int cmd_select_lambda(const CommonArgs& args) {
  Context ctx(args);
  Pipeline p(ctx.cfg, ctx.cache_ptr());
  const AttributorConfig& a = ctx.cfg.attributor;
  require(a.spectral(), ErrorKind::Config, "select-lambda needs attributor iffim, iffim-projected or trak");
  const GridSpec g = p.grid(a);
  const SurrogateReport sr = p.surrogate(a, g.values);
  write_text(ctx.out / "surrogate.csv", surrogate_csv(sr));
  write_json(ctx.out / "selection.json", selection_json(sr, p.grid_json(g), ctx.cfg.seed,
                                                        static_cast<std::size_t>(p.test_set().size()), p.quantiles(a),
                                                        a.id, false));
  std::cout << "lambda_hat " << format_number(sr.lambda_hat) << " (xi_bar " << format_number(sr.xi_bar[sr.selected])
            << ")\n";
  ctx.report_counters(std::cout);
  return 0;
}

int cmd_sweep(const CommonArgs& args) {
  Context ctx(args);
  Pipeline p(ctx.cfg, ctx.cache_ptr());
  const SweepResult res = run_sweep(p, ctx.out, &std::cout);
  ctx.report_counters(std::cout);
  if (res.failure) {
    std::cerr << "sweep finished with failed cells; reports are marked partial\n";
    return exit_code_for(*res.failure);
  }
  if (res.selection_error) {
    std::cerr << "selection incomplete: " << *res.selection_error << "\n";
    return 4;
  }
  return 0;
}

int cmd_diagnose(const CommonArgs& args) {
  Context ctx(args);
  Pipeline p(ctx.cfg, ctx.cache_ptr());
  const Eigen::Index n = p.train_set().size();
  require(n <= kExhaustiveLimit, ErrorKind::Capability,
          "diagnose: n = " + std::to_string(n) + " exceeds the exhaustive limit of 12");
  require(ctx.cfg.model == ModelKind::LogisticRegression, ErrorKind::Capability,
          "diagnose: needs a convex model (logistic-regression)");
  const SubsetOutputs outs = p.retrain(exhaustive_plan(n, p.subset_size()));
  AttributorConfig fim;
  fim.id = "iffim";
  const GridSpec g = p.grid(fim);
  const auto rows = theorem_diagnostic(p.full_model().final, p.train_set(), p.test_set(), outs, g.values);
  write_text(ctx.out / "diagnose.csv", diagnostic_csv(rows));
  std::size_t met = 0, not_met = 0, inconclusive = 0, met_increasing = 0;
  for (const auto& r : rows) {
    if (r.diagnostic.condition == Condition::Met) {
      ++met;
      if (r.dcp_dlambda > 0.0) ++met_increasing;
    } else if (r.diagnostic.condition == Condition::NotMet) {
      ++not_met;
    } else {
      ++inconclusive;
    }
  }
  write_json(ctx.out / "diagnose.json", {{"schema_version", kReportSchemaVersion},
                                         {"n", n},
                                         {"a", outs.plan.a},
                                         {"subsets", outs.plan.size()},
                                         {"grid_spec", p.grid_json(g)},
                                         {"met", met},
                                         {"not_met", not_met},
                                         {"inconclusive", inconclusive},
                                         {"met_with_increasing_cp", met_increasing}});
  std::cout << "condition met at " << met << " cells; c_p increasing at " << met_increasing << " of them\n";
  ctx.report_counters(std::cout);
  return 0;
}

constexpr const char* kColumnsHelp = R"(Output files (CSV columns):
  lds_report.csv, cells/cell_NNNN.csv
      test_index     validation point index
      spearman       Spearman LDS for that point (nan when undefined)
      excluded_flag  1 if the point was left out (constant ranks), else 0
  lds_curve.csv
      lambda         regularization value
      lds_mean       mean LDS over non-excluded points
      lds_stderr     standard error of that mean
      xi_bar         mean surrogate indicator over non-degenerate points
      skipped        number of degenerate validation points
  surrogate.csv
      lambda, xi_bar, skipped   as above
  sweep_summary.csv
      cell           cell index (last axis varies fastest)
      <axis>...      one column per sweep axis with the cell's value
      lds_mean, lds_stderr, excluded, status ("ok" or the error), report (cell CSV path)
  diagnose.csv
      test_index, lambda
      lhs            oracle ratio r / sqrt(o * t1)
      rhs            surrogate indicator xi
      condition      met | not-met | inconclusive (r <= 0)
      r              oracle covariance term
      cp             exhaustive population Pearson LDS
      dcp_dlambda    central difference of cp at lambda * 1.05 and lambda / 1.05
Exit codes: 0 success, 2 config error, 3 capability error, 4 numerical error, 1 other.
ATTUNE_CACHE_DIR overrides the retrain cache location (default ./.attune-cache).)";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attune: training-data attribution with regularization selection"};
  app.require_subcommand(1);
  app.footer(kColumnsHelp);

  CommonArgs args;
  std::function<int(const CommonArgs&)> action;
  const auto add = [&](const char* name, const char* help, int (*fn)(const CommonArgs&)) {
    CLI::App* cmd = app.add_subcommand(name, help);
    add_common(cmd, args);
    cmd->footer(kColumnsHelp);
    cmd->callback([&action, fn] { action = fn; });
  };
  add("gen-data", "Generate (or load) the training and validation sets into <out>/data", cmd_gen_data);
  add("train", "Train the full-data model; writes model.atck and train_report.json", cmd_train);
  add("retrain", "Retrain on the subset plan; writes subsets/outputs.atrm and subsets/plan.json", cmd_retrain);
  add("attribute", "Compute the configured attributor's scores; writes attribution.atrm(.json)", cmd_attribute);
  add("evaluate-lds", "Attribute and score by LDS; writes lds_report.csv and lds_summary.json", cmd_evaluate_lds);
  add("select-lambda", "Pick lambda by the surrogate indicator; writes surrogate.csv and selection.json",
      cmd_select_lambda);
  add("sweep", "Grid sweep over attributor hyperparameters; writes cells/, sweep_summary.csv and, for lambda-only "
               "sweeps, lds_curve.csv, surrogate.csv and selection.json",
      cmd_sweep);
  add("diagnose", "Exhaustive oracle check of the sufficient condition (n <= 12, logistic regression); writes "
                  "diagnose.csv and diagnose.json",
      cmd_diagnose);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    return action(args);
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
