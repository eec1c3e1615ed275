#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <system_error>
#include <vector>

#include "json.hpp"

#include "attune/error.hpp"
#include "attune/evaluation.hpp"
#include "attune/lambda_select.hpp"

namespace attune {

inline constexpr int kReportSchemaVersion = 1;

inline constexpr const char* kLdsReportHeader = "test_index,spearman,excluded_flag";
inline constexpr const char* kLdsCurveHeader = "lambda,lds_mean,lds_stderr,xi_bar,skipped";
inline constexpr const char* kSurrogateHeader = "lambda,xi_bar,skipped";
inline constexpr const char* kDiagnoseHeader = "test_index,lambda,lhs,rhs,condition,r,cp,dcp_dlambda";

/// Shortest round-trip decimal; "nan" for undefined values.
inline std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

/// JSON number, or null when undefined.
inline nlohmann::json json_number(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(os.good(), ErrorKind::Format, "cannot write " + path.string());
  os << text;
  require(os.good(), ErrorKind::Format, "short write to " + path.string());
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::string lds_report_csv(const LdsReport& r) {
  std::string out = std::string(kLdsReportHeader) + "\n";
  for (Eigen::Index t = 0; t < r.scores.size(); ++t)
    out += std::to_string(t) + "," + format_number(r.scores(t)) + "," +
           (r.excluded[static_cast<std::size_t>(t)] ? "1" : "0") + "\n";
  return out;
}

inline nlohmann::json lds_summary_json(const LdsReport& r) {
  return {{"schema_version", kReportSchemaVersion},
          {"attributor", r.attributor},
          {"mean", json_number(r.mean)},
          {"stderr", json_number(r.standard_error)},
          {"s", r.s},
          {"a", r.a},
          {"seed", r.seed},
          {"test_points", r.scores.size()},
          {"excluded", r.excluded_count()}};
}

struct CurveRow {
  double lambda = 0.0;
  double lds_mean = std::numeric_limits<double>::quiet_NaN();
  double lds_stderr = std::numeric_limits<double>::quiet_NaN();
  double xi_bar = std::numeric_limits<double>::quiet_NaN();
  std::size_t skipped = 0;
};

inline std::string lds_curve_csv(const std::vector<CurveRow>& rows) {
  std::string out = std::string(kLdsCurveHeader) + "\n";
  for (const auto& r : rows)
    out += format_number(r.lambda) + "," + format_number(r.lds_mean) + "," + format_number(r.lds_stderr) + "," +
           format_number(r.xi_bar) + "," + std::to_string(r.skipped) + "\n";
  return out;
}

inline std::string surrogate_csv(const SurrogateReport& s) {
  std::string out = std::string(kSurrogateHeader) + "\n";
  for (std::size_t k = 0; k < s.grid.size(); ++k)
    out += format_number(s.grid[k]) + "," + format_number(s.xi_bar[k]) + "," + std::to_string(s.skipped[k]) + "\n";
  return out;
}

/// λ at each spectrum quantile, with its LDS when one was measured.
struct QuantilePoint {
  int percent = 0;
  double lambda = 0.0;
  std::optional<double> lds_mean;
  std::optional<double> lds_stderr;
};

inline nlohmann::json selection_json(const SurrogateReport& s, const nlohmann::json& grid_spec, std::uint64_t seed,
                                     std::size_t validation_size, const std::vector<QuantilePoint>& quantiles,
                                     const std::string& attributor, bool partial) {
  nlohmann::json q = nlohmann::json::object();
  for (const auto& p : quantiles) {
    nlohmann::json e = {{"lambda", p.lambda}};
    if (p.lds_mean) e["lds_mean"] = json_number(*p.lds_mean);
    if (p.lds_stderr) e["lds_stderr"] = json_number(*p.lds_stderr);
    q[std::to_string(p.percent)] = e;
  }
  return {{"schema_version", kReportSchemaVersion},
          {"attributor", attributor},
          {"lambda_hat", s.lambda_hat},
          {"selected_index", s.selected},
          {"xi_bar_at_lambda_hat", json_number(s.xi_bar[s.selected])},
          {"threshold", s.threshold},
          {"grid_spec", grid_spec},
          {"seed", seed},
          {"validation_size", validation_size},
          {"skipped_at_lambda_hat", s.skipped[s.selected]},
          {"quantiles", q},
          {"partial", partial}};
}

/// One sweep cell: its axis settings and outcome. `status` is "ok" or the failure message.
struct SweepCell {
  std::vector<nlohmann::json> settings;  // aligned with the sweep axes
  LdsReport report;
  std::string status = "ok";
  std::string file;

  bool ok() const { return status == "ok"; }
};

inline std::string csv_field(const nlohmann::json& v) {
  std::string s = v.is_string() ? v.get<std::string>() : v.is_number_float() ? format_number(v.get<double>()) : v.dump();
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string quoted = "\"";
  for (char c : s) quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
  return quoted + "\"";
}

inline std::string sweep_summary_header(const std::vector<std::string>& axes) {
  std::string h = "cell";
  for (const auto& a : axes) h += "," + a;
  return h + ",lds_mean,lds_stderr,excluded,status,report";
}

inline std::string sweep_summary_csv(const std::vector<std::string>& axes, const std::vector<SweepCell>& cells) {
  std::string out = sweep_summary_header(axes) + "\n";
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto& cell = cells[c];
    out += std::to_string(c);
    for (const auto& v : cell.settings) out += "," + csv_field(v);
    out += "," + format_number(cell.report.mean) + "," + format_number(cell.report.standard_error) + "," +
           std::to_string(cell.report.excluded_count()) + "," + csv_field(cell.status) + "," + cell.file + "\n";
  }
  return out;
}

/// Minimal reader for the CSVs above (quoted fields supported).
inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(is.good(), ErrorKind::Format, "cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          fields.back() += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          fields.back() += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        fields.emplace_back();
      } else {
        fields.back() += c;
      }
    }
    rows.push_back(std::move(fields));
  }
  return rows;
}

}  // namespace attune
