#pragma once

#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "attune/config.hpp"
#include "attune/error.hpp"
#include "attune/parallel.hpp"
#include "attune/pipeline.hpp"
#include "attune/report.hpp"

namespace attune {

/// Axes after "grid" expansion; cells enumerate the product, last axis fastest.
struct SweepPlan {
  AttributorConfig base;
  std::vector<SweepAxis> axes;
  std::size_t cell_count = 1;

  bool lambda_only() const { return axes.size() == 1 && axes[0].name == "regularization"; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& a : axes) out.push_back(a.name);
    return out;
  }

  std::string shape() const {
    std::string s;
    for (const auto& a : axes) s += (s.empty() ? "" : " x ") + std::to_string(a.values.size());
    return s;
  }

  std::vector<nlohmann::json> settings(std::size_t cell) const {
    std::vector<nlohmann::json> out(axes.size());
    for (std::size_t k = axes.size(); k-- > 0;) {
      out[k] = axes[k].values[cell % axes[k].values.size()];
      cell /= axes[k].values.size();
    }
    return out;
  }

  AttributorConfig cell_config(std::size_t cell) const {
    nlohmann::json j = base.to_json();
    const auto s = settings(cell);
    for (std::size_t k = 0; k < axes.size(); ++k) j[axes[k].name] = s[k];
    return parse_attributor(j, "sweep cell " + std::to_string(cell));
  }
};

inline SweepPlan plan_sweep(Pipeline& p) {
  const RunConfig& cfg = p.config();
  SweepPlan plan;
  plan.base = cfg.attributor;
  plan.axes = cfg.sweep;
  if (plan.axes.empty()) {
    require(cfg.attributor.spectral(), ErrorKind::Config,
            "sweep: no axes given and attributor " + cfg.attributor.id + " has no lambda grid");
    plan.axes.push_back({"regularization", {nlohmann::json("grid")}});
  }
  for (auto& a : plan.axes) {
    if (a.values.size() == 1 && a.values[0].is_string() && a.values[0] == "grid") {
      a.values.clear();
      for (double v : p.grid(plan.base).values) a.values.emplace_back(v);
    }
    plan.cell_count *= a.values.size();
  }
  return plan;
}

struct SweepResult {
  SweepPlan plan;
  std::vector<SweepCell> cells;
  std::optional<ErrorKind> failure;  // kind of the lowest-index failed cell
  std::optional<std::string> selection_error;

  bool partial() const { return failure.has_value() || selection_error.has_value(); }
};

namespace detail {

inline std::string cell_name(std::size_t c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "cell_%04zu", c);
  return buf;
}

}  // namespace detail

/// Evaluates every cell against one shared set of subset retrains and writes
/// cells/cell_NNNN.{csv,json} and sweep_summary.csv under `out`. A sweep over
/// regularization alone on a spectral attributor also writes lds_curve.csv,
/// surrogate.csv and selection.json (λ̂ selected over the swept values).
inline SweepResult run_sweep(Pipeline& p, const std::filesystem::path& out, std::ostream* log = nullptr) {
  SweepResult res;
  res.plan = plan_sweep(p);
  const SweepPlan& plan = res.plan;
  if (log) *log << "sweep: " << plan.cell_count << " cells (" << plan.shape() << ")\n";

  // Validate every cell before any training.
  std::vector<AttributorConfig> configs;
  for (std::size_t c = 0; c < plan.cell_count; ++c) configs.push_back(plan.cell_config(c));

  const SubsetOutputs& outs = p.subset_outputs();
  const bool spectral_curve = plan.lambda_only() && plan.base.spectral();
  if (spectral_curve) p.spectral(plan.base);

  const std::size_t workers = p.config().worker_count();
  const std::size_t inner = plan.cell_count > 1 ? 1 : workers;
  res.cells.resize(plan.cell_count);
  std::vector<std::optional<ErrorKind>> kinds(plan.cell_count);
  parallel_for(plan.cell_count, workers, [&](std::size_t c) {
    SweepCell& cell = res.cells[c];
    cell.settings = plan.settings(c);
    cell.file = "cells/" + detail::cell_name(c) + ".csv";
    try {
      const AttributionMatrix attr = p.attribute(configs[c], std::nullopt, inner);
      cell.report = lds(attr, outs);
    } catch (const Error& e) {
      cell.status = e.what();
      cell.report = LdsReport{};
      cell.report.scores = Vector::Constant(p.test_set().size(), std::numeric_limits<double>::quiet_NaN());
      cell.report.excluded.assign(static_cast<std::size_t>(p.test_set().size()), true);
      cell.report.attributor = configs[c].id;
      kinds[c] = e.kind();
    }
  });
  for (const auto& k : kinds)
    if (k) {
      res.failure = k;
      break;
    }

  for (std::size_t c = 0; c < plan.cell_count; ++c) {
    const SweepCell& cell = res.cells[c];
    write_text(out / cell.file, lds_report_csv(cell.report));
    nlohmann::json j = lds_summary_json(cell.report);
    nlohmann::json settings = nlohmann::json::object();
    for (std::size_t k = 0; k < plan.axes.size(); ++k) settings[plan.axes[k].name] = cell.settings[k];
    j["settings"] = settings;
    j["status"] = cell.status;
    write_json(out / "cells" / (detail::cell_name(c) + ".json"), j);
  }
  write_text(out / "sweep_summary.csv", sweep_summary_csv(plan.names(), res.cells));

  if (spectral_curve) {
    std::vector<CurveRow> rows(plan.cell_count);
    std::vector<double> positive;
    for (std::size_t c = 0; c < plan.cell_count; ++c) {
      rows[c].lambda = plan.axes[0].values[c].get<double>();
      rows[c].lds_mean = res.cells[c].report.mean;
      rows[c].lds_stderr = res.cells[c].report.standard_error;
      if (rows[c].lambda > 0.0) positive.push_back(rows[c].lambda);
    }
    try {
      require(!positive.empty(), ErrorKind::Domain, "selection: no positive lambda among the swept values");
      const SurrogateReport sr = p.surrogate(plan.base, positive);
      for (auto& row : rows) {
        for (std::size_t k = 0; k < sr.grid.size(); ++k)
          if (sr.grid[k] == row.lambda) {
            row.xi_bar = sr.xi_bar[k];
            row.skipped = sr.skipped[k];
          }
      }
      auto quantiles = p.quantiles(plan.base);
      for (auto& q : quantiles) {
        try {
          AttributorConfig qc = plan.base;
          qc.regularization = q.lambda;
          const LdsReport r = lds(p.attribute(qc, q.lambda, workers), outs);
          q.lds_mean = r.mean;
          q.lds_stderr = r.standard_error;
        } catch (const Error& e) {
          res.selection_error = std::string("quantile ") + std::to_string(q.percent) + ": " + e.what();
        }
      }
      const auto& axes_cfg = p.config().sweep;
      const bool grid_axis = axes_cfg.empty() || (axes_cfg[0].values.size() == 1 && axes_cfg[0].values[0] == "grid");
      nlohmann::json grid_spec = grid_axis ? p.grid_json(p.grid(plan.base)) : p.grid_json(explicit_grid(positive));
      if (!grid_axis) grid_spec["spec"] = "sweep";
      write_text(out / "surrogate.csv", surrogate_csv(sr));
      write_json(out / "selection.json",
                 selection_json(sr, grid_spec, p.config().seed, static_cast<std::size_t>(p.test_set().size()), quantiles,
                                plan.base.id, res.partial()));
    } catch (const Error& e) {
      res.selection_error = e.what();
    }
    write_text(out / "lds_curve.csv", lds_curve_csv(rows));
  }

  nlohmann::json axes = nlohmann::json::array();
  for (const auto& a : plan.axes) axes.push_back({{"name", a.name}, {"values", a.values}});
  nlohmann::json summary = {{"schema_version", kReportSchemaVersion},
                            {"attributor", plan.base.id},
                            {"axes", axes},
                            {"cells", plan.cell_count},
                            {"partial", res.partial()}};
  if (res.selection_error) summary["selection_error"] = *res.selection_error;
  write_json(out / "sweep.json", summary);
  return res;
}

}  // namespace attune
