#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "dualdyn/dualdyn.hpp"

using namespace dualdyn;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_classify(std::size_t epochs = 3) {
  return config_from_json(nlohmann::json::parse(
      R"({"task":"classify","epochs":)" + std::to_string(epochs) +
      R"(,"lr":0.01,"n_h":16,"d_z":4,"batch_size":16,"dataset":{"n":40,"length":12}})"));
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dualdyn_harness_" + name);
  fs::remove_all(p);
  return p;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

std::string cli() {
  const char* p = std::getenv("DUALDYN_CLI");
  return p ? p : "";
}

int run_cli(const std::string& args) {
  const int rc = std::system((cli() + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Config, MinimalDefaults) {
  const auto c = config_from_json(nlohmann::json::parse(R"({"task":"classify"})"));
  EXPECT_EQ(c.task, Task::classify);
  EXPECT_EQ(c.lr, 0.001);
  EXPECT_EQ(c.epochs, 100u);
  EXPECT_EQ(c.missing_rate, 0.0);
  EXPECT_EQ(c.backbone, BackboneKind::cde);
  EXPECT_EQ(c.flow, FlowKind::coupling);
  EXPECT_EQ(c.mode, Mode::dual);
  EXPECT_EQ(c.dataset_kind(), "spirals");
}

TEST(Config, GridValuesEnforced) {
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"task":"classify","n_h":48})")), Error);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"task":"classify","n_l":5})")), Error);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"task":"classify","missing_rate":0.4})")), Error);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"task":"classify","lr":0})")), Error);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"task":"interpolate"})")), Error);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"task":"forecast","dataset":{"kind":"spirals"}})")),
               Error);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"task":"classify","dataset":{"kind":"csv"}})")), Error);
}

TEST(Config, TaskRequiredAndTypesChecked) {
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"lr":0.01})")), Error);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"task":"classify","epochs":"ten"})")), Error);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"([1,2])")), Error);
}

TEST(Config, UnknownKeyListsValidKeys) {
  try {
    config_from_json(nlohmann::json::parse(R"({"task":"classify","learning_rate":0.1})"));
    FAIL() << "expected failure";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("learning_rate"), std::string::npos) << msg;
    EXPECT_NE(msg.find("lr"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch_size"), std::string::npos) << msg;
  }
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"task":"classify","dataset":{"size":3}})")), Error);
}

TEST(Config, JsonRoundTrip) {
  const auto c = config_from_json(nlohmann::json::parse(
      R"({"task":"forecast","backbone":"sde","flow":"gru","mode":"backbone-only","missing_rate":0.7,
          "n_l":3,"n_h":64,"d_z":5,"lr":0.02,"batch_size":7,"epochs":9,"seed":12,"steps_per_interval":3,
          "dataset":{"kind":"oscillator","n":30,"length":20,"horizon":4}})"));
  EXPECT_EQ(config_from_json(to_json(c)), c);
}

TEST(Config, ParseFileErrors) {
  const fs::path dir = scratch_dir("parse");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(parse_config((dir / "bad.json").string()), Error);
  EXPECT_THROW(parse_config((dir / "missing.json").string()), Error);
  std::ofstream(dir / "ok.json") << R"({"task":"classify","seed":4})";
  EXPECT_EQ(parse_config((dir / "ok.json").string()).seed, 4u);
  fs::remove_all(dir);
}

TEST(Seeds, DerivedStreamsDiffer) {
  EXPECT_EQ(derive_seed(1, 2), derive_seed(1, 2));
  EXPECT_NE(derive_seed(1, 2), derive_seed(1, 3));
  EXPECT_NE(derive_seed(1, 2), derive_seed(2, 2));
}

TEST(Hash, GitBlobHash) {
  EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST(PrepareData, SplitSizesAndTimeScale) {
  auto c = config_from_json(nlohmann::json::parse(
      R"({"task":"forecast","missing_rate":0.3,"dataset":{"n":40,"length":20,"horizon":5}})"));
  const auto d = prepare_data(c);
  EXPECT_EQ(d.splits.train.size(), 28u);
  EXPECT_EQ(d.splits.val.size(), 6u);
  EXPECT_EQ(d.horizon, 5u);
  EXPECT_NEAR(d.last_time, 2.4, 1e-12);
  EXPECT_EQ(model_spec(c, d).time_scale, d.last_time);
}

TEST(RunExperiment, ReportShape) {
  const auto c = small_classify(3);
  const RunReport r = run_experiment(c);
  EXPECT_TRUE(r.ok());
  EXPECT_EQ(r.epochs_run(), 3u);
  EXPECT_EQ(r.train_loss.size(), 3u);
  ASSERT_GE(r.best_epoch, 1u);
  EXPECT_LE(r.best_epoch, 3u);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_GE(r.val_loss[e], r.val_loss[r.best_epoch - 1]);
  ASSERT_TRUE(r.test.has_value());
  EXPECT_TRUE(r.test->accuracy.has_value());
  EXPECT_TRUE(r.test->auroc.has_value());
  EXPECT_EQ(r.checkpoint_hash.size(), 40u);
  EXPECT_EQ(r.train_index.size() + r.val_index.size() + r.test_index.size(), 40u);
  const auto j = to_json(r);
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"best_epoch", "checkpoint_hash", "config", "epochs_run", "error",
                                            "parameter_count", "partition", "status", "test", "train_loss",
                                            "val_loss", "wall_clock_seconds"}));
}

TEST(RunExperiment, RestoresBestParametersAndWritesFiles) {
  const fs::path dir = scratch_dir("run");
  RunOptions o;
  o.out_dir = dir.string();
  std::ostringstream log;
  o.log = &log;
  const RunReport r = run_experiment(small_classify(4), o);
  EXPECT_NE(log.str().find("epoch 4"), std::string::npos);
  ASSERT_TRUE(fs::exists(dir / "checkpoint.json"));
  ASSERT_TRUE(fs::exists(dir / "report.json"));
  ASSERT_TRUE(fs::exists(dir / "metrics.csv"));
  std::ifstream ck(dir / "checkpoint.json");
  const std::string text((std::istreambuf_iterator<char>(ck)), std::istreambuf_iterator<char>());
  EXPECT_EQ(git_blob_hash(text), r.checkpoint_hash);

  const DualModel restored = model_from_checkpoint(nlohmann::json::parse(text));
  const auto data = prepare_data(r.config);
  const Metrics m = evaluate(restored, PreparedSplit::build(data.splits.test), 128,
                             derive_seed(r.config.seed, noise_stream));
  EXPECT_EQ(m, *r.test);
  const Metrics v = evaluate(restored, PreparedSplit::build(data.splits.val), 128,
                             derive_seed(r.config.seed, noise_stream));
  EXPECT_EQ(v.loss, r.val_loss[r.best_epoch - 1]);

  EXPECT_EQ(read_json(dir / "report.json")["checkpoint_hash"], r.checkpoint_hash);
  std::ifstream csv(dir / "metrics.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 5u);
  fs::remove_all(dir);
}

TEST(RunExperiment, Deterministic) {
  const auto c = small_classify(2);
  const RunReport a = run_experiment(c), b = run_experiment(c);
  EXPECT_EQ(a.val_loss, b.val_loss);
  EXPECT_EQ(*a.test, *b.test);
  EXPECT_EQ(a.checkpoint_hash, b.checkpoint_hash);
}

TEST(RunExperiment, DivergenceReported) {
  auto c = small_classify(2);
  c.lr = 1e300;
  const RunReport r = run_experiment(c);
  EXPECT_EQ(r.status, "diverged");
  EXPECT_FALSE(r.error.empty());
  EXPECT_EQ(to_json(r)["status"], "diverged");
}

TEST(RunExperiment, ForecastAndInterpolate) {
  const auto f = run_experiment(config_from_json(nlohmann::json::parse(
      R"({"task":"forecast","epochs":1,"d_z":4,"missing_rate":0.3,"dataset":{"n":20,"length":15,"horizon":3}})")));
  ASSERT_TRUE(f.test.has_value());
  EXPECT_TRUE(f.test->mse.has_value());
  EXPECT_FALSE(f.test->accuracy.has_value());
  const auto i = run_experiment(config_from_json(nlohmann::json::parse(
      R"({"task":"interpolate","epochs":1,"d_z":4,"missing_rate":0.5,"dataset":{"n":20,"length":15}})")));
  ASSERT_TRUE(i.test.has_value());
  EXPECT_GT(*i.test->mse, 0.0);
}

TEST(Ablation, SharedPartitionAndRankedSummary) {
  const fs::path dir = scratch_dir("ablate");
  RunOptions o;
  o.out_dir = dir.string();
  const auto res = run_ablation_suite(small_classify(2), parse_modes("dual,mlp-decoder,backbone-only"), o);
  ASSERT_EQ(res.reports.size(), 3u);
  for (const auto& r : res.reports) {
    EXPECT_EQ(r.train_index, res.reports[0].train_index);
    EXPECT_EQ(r.test_index, res.reports[0].test_index);
  }
  EXPECT_EQ(res.reports[1].config.mode, Mode::mlp_decoder);
  const auto& rows = res.summary["rows"];
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(res.summary["metric"], "accuracy");
  for (std::size_t k = 1; k < rows.size(); ++k) EXPECT_GE(rows[k - 1]["accuracy"], rows[k]["accuracy"]);
  EXPECT_EQ(read_json(dir / "summary.json"), res.summary);
  for (const char* m : {"dual", "mlp-decoder", "backbone-only"}) EXPECT_TRUE(fs::exists(dir / m / "report.json"));
  fs::remove_all(dir);
}

TEST(Ablation, ModeListParsing) {
  EXPECT_EQ(parse_modes("dual,,flow-only").size(), 2u);
  EXPECT_THROW(parse_modes(""), Error);
  EXPECT_THROW(parse_modes("dual,bogus"), Error);
}

TEST(Cli, TrainWritesReport) {
  if (cli().empty()) GTEST_SKIP() << "DUALDYN_CLI not set";
  const fs::path dir = scratch_dir("cli");
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.json") << to_json(small_classify(1)).dump();
  EXPECT_EQ(run_cli("train --quiet --config " + (dir / "cfg.json").string() + " --out " + (dir / "run").string()),
            0);
  EXPECT_EQ(read_json(dir / "run" / "report.json")["status"], "ok");
  EXPECT_NE(run_cli("train --config " + (dir / "nope.json").string()), 0);
  std::ofstream(dir / "bad.json") << R"({"task":"classify","n_h":48})";
  EXPECT_EQ(run_cli("train --quiet --config " + (dir / "bad.json").string()), 1);
  fs::remove_all(dir);
}

TEST(Cli, GenDataRoundTrips) {
  if (cli().empty()) GTEST_SKIP() << "DUALDYN_CLI not set";
  const fs::path dir = scratch_dir("gen");
  const fs::path csv = dir / "osc.csv";
  EXPECT_EQ(run_cli("gen-data --kind oscillator --n 6 --length 8 --horizon 2 --seed 3 --out " + csv.string()), 0);
  const auto b = load_csv(csv.string());
  EXPECT_EQ(b.size(), 6u);
  EXPECT_EQ(b.series[0].length(), 10u);
  fs::remove_all(dir);
}
