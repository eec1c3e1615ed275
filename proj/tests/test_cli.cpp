#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "json.hpp"

#include "attune/cache.hpp"
#include "attune/config.hpp"
#include "attune/data.hpp"
#include "attune/report.hpp"
#include "attune/sweep.hpp"

namespace fs = std::filesystem;
using namespace attune;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

/// Relative path -> bytes for every regular file under `dir`.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

json small_config() {
  return {{"dataset", {{"synthetic", {{"n", 60}, {"d", 5}}}}},
          {"model", {{"kind", "logistic-regression"}}},
          {"train", {{"epochs", 5}}},
          {"subsets", {{"count", 8}}},
          {"validation_size", 8},
          {"seed", 3},
          {"workers", 1}};
}

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    root_ = fs::temp_directory_path() /
            ("attune-cli-" + std::to_string(::getpid()) + "-" + info->test_suite_name() + "-" + info->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  fs::path write_config(const json& j, const std::string& name = "config.json") {
    const fs::path p = root_ / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  struct Run {
    int code = -1;
    std::string out, err;
  };

  Run cli(const std::string& args) {
    const fs::path out = root_ / "stdout.txt", err = root_ / "stderr.txt";
    const std::string cmd = "ATTUNE_CACHE_DIR='" + (root_ / "cache").string() + "' '" + ATTUNE_CLI_PATH + "' " + args +
                            " >'" + out.string() + "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  fs::path root_;
};

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::Domain;
}

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  ADD_FAILURE() << "no error raised";
  return "";
}

}  // namespace

// Configuration

TEST(Config, UnknownKeySuggestsNearestName) {
  json j = small_config();
  j["attributor"] = {{"id", "iffim"}, {"regularisation", 0.1}};
  const std::string msg = message_of([&] { parse_config(j); });
  EXPECT_NE(msg.find("unknown key 'attributor.regularisation'"), std::string::npos) << msg;
  EXPECT_NE(msg.find("did you mean 'regularization'"), std::string::npos) << msg;
  EXPECT_EQ(kind_of([&] { parse_config(j); }), ErrorKind::Config);
}

TEST(Config, UnknownTopLevelAndAttributorIds) {
  json j = small_config();
  j["tresh"] = 0.5;
  EXPECT_NE(message_of([&] { parse_config(j); }).find("unknown key 'tresh'"), std::string::npos);
  json k = small_config();
  k["attributor"] = {{"id", "trak2"}};
  EXPECT_NE(message_of([&] { parse_config(k); }).find("did you mean 'trak'"), std::string::npos);
}

TEST(Config, MissingRequiredKeys) {
  json j = small_config();
  j.erase("model");
  EXPECT_NE(message_of([&] { parse_config(j); }).find("missing required key 'model'"), std::string::npos);
  json k = small_config();
  k["model"] = json::object();
  EXPECT_NE(message_of([&] { parse_config(k); }).find("missing required key 'model.kind'"), std::string::npos);
  EXPECT_EQ(kind_of([] { parse_config_text("{not json"); }), ErrorKind::Config);
}

TEST(Config, MinimalConfigGetsDefaults) {
  const RunConfig c =
      parse_config({{"dataset", {{"synthetic", json::object()}}}, {"model", {{"kind", "logistic-regression"}}}});
  EXPECT_EQ(c.dataset.synthetic, SyntheticSpec{});
  EXPECT_EQ(c.attributor.id, "iffim");
  EXPECT_FALSE(c.attributor.regularization.has_value());
  EXPECT_EQ(c.train.epochs, 50u);
  EXPECT_EQ(c.train.init, InitMode::Warm);
  EXPECT_DOUBLE_EQ(c.subsets.fraction, 0.5);
  EXPECT_EQ(c.subsets.count, 50u);
  EXPECT_TRUE(c.grid.automatic);
  EXPECT_EQ(c.grid.points, kAutoGridPoints);
  EXPECT_DOUBLE_EQ(c.threshold, 0.5);
  EXPECT_EQ(c.validation_size, 64);
  EXPECT_EQ(c.seed, 0u);

  const RunConfig m = parse_config({{"dataset", {{"synthetic", json::object()}}}, {"model", {{"kind", "mlp"}}}});
  EXPECT_EQ(m.hidden_dim, 64);
  EXPECT_EQ(m.train.init, InitMode::Cold);
}

TEST(Config, AttributorDefaults) {
  const auto trak_cfg = parse_attributor({{"id", "trak"}});
  ASSERT_TRUE(trak_cfg.regularization.has_value());
  EXPECT_EQ(*trak_cfg.regularization, 0.0);
  EXPECT_EQ(trak_cfg.projection_dim, kDefaultProjectionDim);
  EXPECT_FALSE(trak_cfg.with_r);
  EXPECT_EQ(parse_attributor({{"id", "iffim-projected"}}).projection_dim, kDefaultProjectionDim);
  EXPECT_EQ(*parse_attributor({{"id", "if-explicit"}}).regularization, 1e-5);
  const auto cg = parse_attributor({{"id", "if-cg"}});
  EXPECT_EQ(*cg.regularization, 1e-2);
  EXPECT_EQ(cg.max_iteration, 10u);
  const auto lissa = parse_attributor({{"id", "if-lissa"}});
  EXPECT_EQ(*lissa.regularization, 1e-3);
  EXPECT_EQ(lissa.scaling, 5.0);
  EXPECT_EQ(lissa.recursion_depth, 1000u);
  EXPECT_EQ(lissa.batch_size, 50u);
  const auto tr = parse_attributor({{"id", "tracin"}});
  EXPECT_FALSE(tr.normalize);
  EXPECT_EQ(tr.checkpoints, 10u);
}

TEST(Config, RangeChecks) {
  for (const auto& [key, value] : std::vector<std::pair<std::string, json>>{
           {"threshold", 0.7}, {"validation_size", 0}, {"subsets", {{"fraction", 1.0}}}, {"subsets", {{"count", 2}}}}) {
    json j = small_config();
    j[key] = value;
    EXPECT_EQ(kind_of([&] { parse_config(j); }), ErrorKind::Config) << key;
  }
  json g = small_config();
  g["lambda_grid"] = json::array({0.1, -1.0});
  EXPECT_EQ(kind_of([&] { parse_config(g); }), ErrorKind::Config);
  json h = small_config();
  h["model"]["hidden_dim"] = 8;
  EXPECT_EQ(kind_of([&] { parse_config(h); }), ErrorKind::Config);
}

TEST(Config, GridForms) {
  EXPECT_TRUE(parse_grid("auto").automatic);
  const auto listed = parse_grid(json::array({1.0, 0.1, 0.1}));
  EXPECT_FALSE(listed.automatic);
  EXPECT_EQ(listed.values, (std::vector<double>{0.1, 1.0}));
  EXPECT_EQ(parse_grid({{"points", 7}}).points, 7u);
  EXPECT_EQ(kind_of([] { parse_grid("dense"); }), ErrorKind::Config);
}

TEST(Config, SweepAxesAreValidatedUpFront) {
  json j = small_config();
  j["attributor"] = {{"id", "if-cg"}};
  j["sweep"] = {{"axes", {{{"name", "max_iteration"}, {"values", {5, 0}}}}}};
  EXPECT_EQ(kind_of([&] { parse_config(j); }), ErrorKind::Config);
  j["sweep"] = {{"axes", {{{"name", "projection_dim"}, {"values", {8}}}}}};
  EXPECT_NE(message_of([&] { parse_config(j); }).find("does not apply"), std::string::npos);
  j["sweep"] = {{"axes", {{{"name", "regularization"}, {"values", "grid"}}}}};
  EXPECT_EQ(kind_of([&] { parse_config(j); }), ErrorKind::Config);
  j["sweep"] = {{"axes", {{{"name", "regularisation"}, {"values", {0.1}}}}}};
  EXPECT_NE(message_of([&] { parse_config(j); }).find("did you mean 'regularization'"), std::string::npos);
}

TEST(Config, ResolvedConfigRoundTrips) {
  json j = small_config();
  j["lambda_grid"] = "auto";
  const RunConfig c = parse_config(j);
  json resolved = c.to_json();
  EXPECT_EQ(resolved["lambda_grid"], "auto");
  EXPECT_FALSE(resolved.contains("output_dir"));
  EXPECT_FALSE(resolved.contains("workers"));
  resolved.erase("conventions");
  resolved["train"].erase("seed");
  EXPECT_EQ(parse_config(resolved).to_json(), c.to_json());
}

// Synthetic data

TEST(Data, ShapesAndDeterminism) {
  SyntheticSpec s;
  s.n = 40;
  s.d = 3;
  const auto [train, test] = synthetic_blobs(s, 7, 5);
  EXPECT_EQ(train.size(), 40);
  EXPECT_EQ(test.size(), 7);
  EXPECT_EQ(train.dim(), 3);
  const auto again = synthetic_blobs(s, 7, 5);
  EXPECT_EQ(dataset_hash(train), dataset_hash(again.first));
  EXPECT_EQ(dataset_hash(test), dataset_hash(again.second));
  EXPECT_NE(dataset_hash(train), dataset_hash(synthetic_blobs(s, 7, 6).first));
}

TEST(Data, ClassMeansSitAtHalfTheSeparation) {
  SyntheticSpec s;
  s.n = 20000;
  s.d = 4;
  s.separation = 3.0;
  const auto train = synthetic_blobs(s, 1, 9).first;
  Matrix sums = Matrix::Zero(2, 4);
  Vector counts = Vector::Zero(2);
  for (Eigen::Index i = 0; i < train.size(); ++i) {
    const int y = train.labels[static_cast<std::size_t>(i)];
    sums.row(y) += train.features.row(i);
    counts(y) += 1;
  }
  const Vector m0 = sums.row(0).transpose() / counts(0), m1 = sums.row(1).transpose() / counts(1);
  EXPECT_NEAR(m0.norm(), 1.5, 0.05);
  EXPECT_NEAR((m0 + m1).norm(), 0.0, 0.1);
  EXPECT_NEAR(counts(0) / double(s.n), 0.5, 0.02);
}

TEST_F(TempDir, DatasetRoundTrip) {
  SyntheticSpec s;
  s.n = 12;
  s.d = 3;
  const Dataset d = synthetic_blobs(s, 2, 1).first;
  save_dataset(root_ / "d.atrm", d);
  const Dataset back = load_dataset(root_ / "d.atrm");
  EXPECT_EQ(dataset_hash(back), dataset_hash(d));
  EXPECT_EQ(back.name, d.name);
}

// Cache

TEST_F(TempDir, CacheStoresAndVerifies) {
  RetrainCache cache(root_ / "c");
  const std::string key = std::string(64, 'a');
  EXPECT_FALSE(cache.get(key));
  cache.put(key, "payload bytes");
  ASSERT_TRUE(cache.get(key));
  EXPECT_EQ(*cache.get(key), "payload bytes");
  EXPECT_EQ(cache.writes(), 1u);

  std::fstream f(cache.entry_path(key), std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(2);
  f.put('X');
  f.close();
  EXPECT_FALSE(cache.get(key));
  EXPECT_EQ(cache.corrupt(), 1u);

  cache.put(key, "payload bytes");
  EXPECT_EQ(*cache.get(key), "payload bytes");
  for (const auto& e : fs::recursive_directory_iterator(root_ / "c"))
    EXPECT_EQ(e.path().string().find(".tmp."), std::string::npos) << e.path();
}

TEST(Cache, DisabledCacheNeverHits) {
  RetrainCache cache;
  cache.put("ab", "x");
  EXPECT_FALSE(cache.get("ab"));
  EXPECT_FALSE(cache.enabled());
}

TEST(Cache, CheckpointBundleRoundTrip) {
  std::vector<Checkpoint> cs;
  for (int k = 0; k < 3; ++k)
    cs.push_back({{ModelKind::Mlp, 3, 2, 2}, Vector::LinSpaced(14, k, k + 1.0), static_cast<std::uint64_t>(k), 7, 1e-3});
  const auto back = decode_checkpoints(encode_checkpoints(cs));
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(back[k].theta, cs[k].theta);
    EXPECT_EQ(back[k].epoch, cs[k].epoch);
  }
}

// Report formatting

TEST(Report, NumbersRoundTripExactly) {
  for (double x : {0.1, 1.0 / 3.0, 1e-300, -2.5e17, 123456789.125}) EXPECT_EQ(std::stod(format_number(x)), x);
  EXPECT_EQ(format_number(std::nan("")), "nan");
  EXPECT_TRUE(json_number(std::nan("")).is_null());
}

TEST(Report, GoldenHeaders) {
  EXPECT_STREQ(kLdsReportHeader, "test_index,spearman,excluded_flag");
  EXPECT_STREQ(kLdsCurveHeader, "lambda,lds_mean,lds_stderr,xi_bar,skipped");
  EXPECT_STREQ(kSurrogateHeader, "lambda,xi_bar,skipped");
  EXPECT_EQ(sweep_summary_header({"regularization", "max_iteration"}),
            "cell,regularization,max_iteration,lds_mean,lds_stderr,excluded,status,report");
}

TEST_F(TempDir, CsvQuotingRoundTrips) {
  SweepCell cell;
  cell.settings = {json(0.25), json("a,\"b\"")};
  cell.status = "failed: x, y";
  cell.report.scores = Vector::Zero(0);
  cell.file = "cells/cell_0000.csv";
  write_text(root_ / "s.csv", sweep_summary_csv({"regularization", "with_r"}, {cell}));
  const auto rows = read_csv(root_ / "s.csv");
  ASSERT_EQ(rows.size(), 2u);
  ASSERT_EQ(rows[1].size(), 8u);
  EXPECT_EQ(rows[1][1], "0.25");
  EXPECT_EQ(rows[1][2], "a,\"b\"");
  EXPECT_EQ(rows[1][6], "failed: x, y");
}

TEST(SweepPlan, LastAxisVariesFastest) {
  SweepPlan plan;
  plan.axes = {{"regularization", {json(0.1), json(1.0), json(10.0)}}, {"max_iteration", {json(1), json(2)}}};
  plan.cell_count = 6;
  EXPECT_EQ(plan.settings(0), (std::vector<json>{json(0.1), json(1)}));
  EXPECT_EQ(plan.settings(1), (std::vector<json>{json(0.1), json(2)}));
  EXPECT_EQ(plan.settings(5), (std::vector<json>{json(10.0), json(2)}));
  EXPECT_EQ(plan.shape(), "3 x 2");
  EXPECT_FALSE(plan.lambda_only());
}

// Command line

TEST_F(TempDir, SelectLambdaWritesReports) {
  const auto cfg = write_config(small_config());
  const auto r = cli("select-lambda --config '" + cfg.string() + "' --out '" + (root_ / "out").string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto surrogate = read_csv(root_ / "out" / "surrogate.csv");
  ASSERT_EQ(surrogate.size(), 1u + kAutoGridPoints);
  EXPECT_EQ(surrogate[0], (std::vector<std::string>{"lambda", "xi_bar", "skipped"}));
  const json sel = json::parse(slurp(root_ / "out" / "selection.json"));
  for (const char* key : {"lambda_hat", "selected_index", "xi_bar_at_lambda_hat", "threshold", "grid_spec", "seed",
                          "validation_size", "quantiles", "partial"})
    EXPECT_TRUE(sel.contains(key)) << key;
  EXPECT_EQ(sel["grid_spec"]["spec"], "auto");
  EXPECT_EQ(sel["validation_size"], 8);
  EXPECT_EQ(sel["quantiles"].size(), 5u);
  const json resolved = json::parse(slurp(root_ / "out" / "resolved_config.json"));
  EXPECT_EQ(resolved["lambda_grid"], "auto");
  EXPECT_NE(r.out.find("eigendecompositions: 1"), std::string::npos) << r.out;
}

TEST_F(TempDir, LambdaSweepIsReproducibleAndCached) {
  const auto cfg = write_config(small_config());
  const auto first = cli("sweep --config '" + cfg.string() + "' --out '" + (root_ / "a").string() + "'");
  ASSERT_EQ(first.code, 0) << first.err;
  EXPECT_NE(first.out.find("retrains: 8"), std::string::npos) << first.out;
  EXPECT_NE(first.out.find("eigendecompositions: 1"), std::string::npos) << first.out;

  const auto curve = read_csv(root_ / "a" / "lds_curve.csv");
  ASSERT_EQ(curve.size(), 1u + kAutoGridPoints);
  EXPECT_EQ(curve[0], (std::vector<std::string>{"lambda", "lds_mean", "lds_stderr", "xi_bar", "skipped"}));
  const json sel = json::parse(slurp(root_ / "a" / "selection.json"));
  const double lambda_hat = sel["lambda_hat"].get<double>();
  bool found = false;
  for (std::size_t k = 1; k < curve.size(); ++k) found = found || std::stod(curve[k][0]) == lambda_hat;
  EXPECT_TRUE(found) << "lambda_hat " << lambda_hat << " missing from lds_curve.csv";
  for (const auto& [key, q] : sel["quantiles"].items()) EXPECT_TRUE(q.contains("lds_mean")) << key;
  EXPECT_EQ(read_csv(root_ / "a" / "cells" / "cell_0000.csv")[0],
            (std::vector<std::string>{"test_index", "spearman", "excluded_flag"}));

  // Warm cache, fresh output directory: no retraining and identical bytes.
  const auto second = cli("sweep --config '" + cfg.string() + "' --out '" + (root_ / "b").string() + "'");
  ASSERT_EQ(second.code, 0) << second.err;
  EXPECT_NE(second.out.find("retrains: 0"), std::string::npos) << second.out;
  EXPECT_NE(second.out.find("eigendecompositions: 1"), std::string::npos) << second.out;
  EXPECT_EQ(tree(root_ / "a"), tree(root_ / "b"));

  // Re-emission into the same directory leaves it unchanged.
  const auto before = tree(root_ / "a");
  ASSERT_EQ(cli("sweep --config '" + cfg.string() + "' --out '" + (root_ / "a").string() + "'").code, 0);
  EXPECT_EQ(tree(root_ / "a"), before);

  // Without the cache the results still match bit for bit.
  const auto uncached = cli("sweep --no-cache --config '" + cfg.string() + "' --out '" + (root_ / "c").string() + "'");
  ASSERT_EQ(uncached.code, 0) << uncached.err;
  EXPECT_NE(uncached.out.find("retrains: 8"), std::string::npos) << uncached.out;
  EXPECT_EQ(tree(root_ / "a"), tree(root_ / "c"));
}

TEST_F(TempDir, TwoAxisSweepWritesEveryCell) {
  json j = small_config();
  j["attributor"] = {{"id", "if-cg"}};
  j["sweep"] = {{"axes",
                 {{{"name", "regularization"}, {"values", {1e-2, 1e-1, 1.0}}},
                  {{"name", "max_iteration"}, {"values", {1, 2, 5, 10}}}}}};
  const auto cfg = write_config(j);
  const auto first = cli("sweep --config '" + cfg.string() + "' --out '" + (root_ / "out").string() + "'");
  ASSERT_EQ(first.code, 0) << first.err;
  EXPECT_NE(first.out.find("12 cells (3 x 4)"), std::string::npos) << first.out;
  std::size_t csvs = 0;
  for (const auto& e : fs::directory_iterator(root_ / "out" / "cells")) csvs += e.path().extension() == ".csv";
  EXPECT_EQ(csvs, 12u);
  const auto summary = read_csv(root_ / "out" / "sweep_summary.csv");
  ASSERT_EQ(summary.size(), 13u);
  EXPECT_EQ(summary[0][1], "regularization");
  EXPECT_EQ(summary[0][2], "max_iteration");
  EXPECT_EQ(summary[2][1], "0.01");
  EXPECT_EQ(summary[2][2], "2");
  for (std::size_t k = 1; k < summary.size(); ++k) EXPECT_EQ(summary[k][6], "ok");
  EXPECT_FALSE(fs::exists(root_ / "out" / "lds_curve.csv"));

  const auto again = cli("sweep --config '" + cfg.string() + "' --out '" + (root_ / "out").string() + "'");
  ASSERT_EQ(again.code, 0) << again.err;
  EXPECT_NE(again.out.find("retrains: 0"), std::string::npos) << again.out;
}

TEST_F(TempDir, CorruptCacheEntryIsRecomputed) {
  const auto cfg = write_config(small_config());
  ASSERT_EQ(cli("retrain --config '" + cfg.string() + "' --out '" + (root_ / "a").string() + "'").code, 0);
  std::size_t damaged = 0;
  for (const auto& e : fs::recursive_directory_iterator(root_ / "cache")) {
    if (!e.is_regular_file()) continue;
    std::fstream f(e.path(), std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(16);
    f.put('\x7f');
    ++damaged;
  }
  ASSERT_GT(damaged, 0u);
  const auto r = cli("retrain --config '" + cfg.string() + "' --out '" + (root_ / "b").string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("failed hash verification"), std::string::npos) << r.err;
  EXPECT_NE(r.out.find("retrains: 8"), std::string::npos) << r.out;
  EXPECT_EQ(tree(root_ / "a"), tree(root_ / "b"));
  const auto healed = cli("retrain --config '" + cfg.string() + "' --out '" + (root_ / "c").string() + "'");
  EXPECT_TRUE(healed.err.empty()) << healed.err;
  EXPECT_NE(healed.out.find("retrains: 0"), std::string::npos) << healed.out;
}

TEST_F(TempDir, PipelineCommands) {
  json j = small_config();
  j["attributor"] = {{"id", "iffim"}, {"regularization", 0.1}};
  const auto cfg = write_config(j);
  const std::string common = " --config '" + cfg.string() + "' --out '" + (root_ / "out").string() + "'";
  for (const char* cmd : {"gen-data", "train", "retrain", "attribute", "evaluate-lds"})
    ASSERT_EQ(cli(std::string(cmd) + common).code, 0) << cmd;
  for (const char* file : {"data/train.atrm", "data/test.atrm", "model.atck", "train_report.json",
                           "subsets/outputs.atrm", "subsets/plan.json", "attribution.atrm", "lds_report.csv",
                           "lds_summary.json", "resolved_config.json"})
    EXPECT_TRUE(fs::exists(root_ / "out" / file)) << file;
  const auto report = read_csv(root_ / "out" / "lds_report.csv");
  ASSERT_EQ(report.size(), 9u);
  EXPECT_EQ(report[0], (std::vector<std::string>{"test_index", "spearman", "excluded_flag"}));
  const json summary = json::parse(slurp(root_ / "out" / "lds_summary.json"));
  EXPECT_EQ(summary["lambda"], 0.1);
  EXPECT_EQ(summary["s"], 8);
  EXPECT_EQ(summary["a"], 30);
}

TEST_F(TempDir, DiagnoseOnSmallConvexInstance) {
  json j = small_config();
  j["dataset"]["synthetic"] = {{"n", 8}, {"d", 3}};
  j["subsets"] = {{"fraction", 0.5}, {"count", 8}};
  j["lambda_grid"] = {{"points", 6}};
  j["train"] = {{"tolerance", 1e-10}};
  const auto cfg = write_config(j);
  const auto r = cli("diagnose --config '" + cfg.string() + "' --out '" + (root_ / "out").string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = read_csv(root_ / "out" / "diagnose.csv");
  ASSERT_EQ(rows.size(), 1u + 6u * 8u);
  EXPECT_EQ(rows[0][0], "test_index");
  EXPECT_EQ(rows[0][7], "dcp_dlambda");
  const json d = json::parse(slurp(root_ / "out" / "diagnose.json"));
  EXPECT_EQ(d["subsets"], 70);
  EXPECT_EQ(d["met_with_increasing_cp"], d["met"]);
}

TEST_F(TempDir, ExitCodes) {
  json bad = small_config();
  bad["attributor"] = {{"id", "iffim"}, {"regularisation", 0.1}};
  const auto bad_cfg = write_config(bad, "bad.json");
  const auto config_error = cli("attribute --config '" + bad_cfg.string() + "' --out '" + (root_ / "o").string() + "'");
  EXPECT_EQ(config_error.code, 2);
  EXPECT_NE(config_error.err.find("did you mean 'regularization'"), std::string::npos) << config_error.err;

  EXPECT_EQ(cli("attribute").code, 2);
  EXPECT_EQ(cli("no-such-command").code, 2);

  const auto big = write_config(small_config(), "big.json");
  const auto capability = cli("diagnose --config '" + big.string() + "' --out '" + (root_ / "o").string() + "'");
  EXPECT_EQ(capability.code, 3);
  EXPECT_NE(capability.err.find("exhaustive limit"), std::string::npos) << capability.err;

  // TRAK at λ = 0 with more parameters than training points has a singular middle term.
  json singular = small_config();
  singular["dataset"]["synthetic"] = {{"n", 10}, {"d", 30}};
  singular["attributor"] = {{"id", "trak"}, {"regularization", 0.0}, {"projection_dim", 20}};
  const auto sing = write_config(singular, "singular.json");
  const auto numerical = cli("attribute --config '" + sing.string() + "' --out '" + (root_ / "o").string() + "'");
  EXPECT_EQ(numerical.code, 4) << numerical.err;

  const auto help = cli("sweep --help");
  EXPECT_EQ(help.code, 0);
  EXPECT_NE(help.out.find("dcp_dlambda"), std::string::npos);
  EXPECT_NE(help.out.find("ATTUNE_CACHE_DIR"), std::string::npos);
}
