#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dualdyn/dualdyn.hpp"

namespace fs = std::filesystem;
using namespace dualdyn;

namespace {

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out, bool quiet) {
  ExperimentConfig config = parse_config(config_path);
  if (seed) config.seed = *seed;
  RunOptions opts;
  opts.out_dir = out;
  if (!quiet) opts.log = &std::cerr;
  const RunReport report = run_experiment(config, opts);
  std::cout << to_json(report).dump(2) << '\n';
  return report.ok() ? 0 : 2;
}

int cmd_ablate(const std::string& config_path, const std::string& modes, const std::string& out, bool quiet) {
  const ExperimentConfig config = parse_config(config_path);
  RunOptions opts;
  opts.out_dir = out;
  if (!quiet) opts.log = &std::cerr;
  const AblationResult result = run_ablation_suite(config, parse_modes(modes), opts);
  std::cout << result.summary.dump(2) << '\n';
  for (const RunReport& r : result.reports)
    if (!r.ok()) return 2;
  return 0;
}

int cmd_verify(bool corrupt, bool json) {
  VerifyOptions opts;
  opts.corrupt_spectral_norm = corrupt;
  const VerificationReport report = run_verification_suite(opts);
  if (json) {
    std::cout << report.to_json().dump(2) << '\n';
  } else {
    for (const PropertyResult& r : report.results)
      std::cout << (r.passed ? "PASS " : "FAIL ") << r.family << ": " << r.name << " (" << r.detail << ")\n";
    std::cout << report.families().size() << " families, " << (report.passed() ? "all passed" : "FAILURES") << '\n';
  }
  return report.passed() ? 0 : 1;
}

int cmd_gen_data(const std::string& kind, const std::string& out, std::size_t n, std::size_t length,
                 std::size_t horizon, double noise, double missing_rate, std::uint64_t seed) {
  TimeSeriesBatch batch;
  if (kind == "spirals") {
    batch = gen_spirals(n, length, noise, seed);
  } else if (kind == "oscillator") {
    batch = gen_damped_oscillator(n, length, horizon, seed);
  } else {
    throw Error("gen-data: --kind must be spirals or oscillator");
  }
  if (missing_rate > 0.0) batch = inject_missingness(std::move(batch), missing_rate, seed);
  if (const auto parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);
  write_csv(batch, out);
  std::cerr << "wrote " << batch.size() << " series to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dualdyn: implicit backbone + explicit flow models for irregular time series"};
  app.require_subcommand(1);

  std::string config, out, modes = "dual,backbone-only,flow-only,mlp-decoder,primary-latent";
  std::optional<std::uint64_t> seed;
  bool quiet = false;

  auto* train = app.add_subcommand("train", "train one model and write report.json, checkpoint.json, metrics.csv");
  train->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "override the config seed");
  train->add_option("--out", out, "output directory");
  train->add_flag("--quiet", quiet, "no per-epoch log");

  auto* ablate = app.add_subcommand("ablate", "one run per mode with shared data and seed");
  ablate->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  ablate->add_option("--modes", modes, "comma-separated modes");
  ablate->add_option("--out", out, "output directory (one subdirectory per mode)");
  ablate->add_flag("--quiet", quiet, "no per-epoch log");

  bool corrupt = false, json = false;
  auto* verify = app.add_subcommand("verify", "run every property suite");
  verify->add_flag("--corrupt-spectral-norm", corrupt, "negative control: inflate flow weights past their bound");
  verify->add_flag("--json", json, "print the report as JSON");

  std::string kind = "spirals", data_out;
  std::size_t n = 400, length = 50, horizon = 10;
  double noise = 0.05, missing_rate = 0.0;
  std::uint64_t data_seed = 0;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset as CSV");
  gen->add_option("--kind", kind, "spirals | oscillator")->check(CLI::IsMember({"spirals", "oscillator"}));
  gen->add_option("--out", data_out, "CSV file")->required();
  gen->add_option("--n", n, "number of series");
  gen->add_option("--length", length, "observed points per series");
  gen->add_option("--horizon", horizon, "forecast points (oscillator)");
  gen->add_option("--noise", noise, "noise std (spirals)");
  gen->add_option("--missing-rate", missing_rate, "fraction of non-initial points to drop");
  gen->add_option("--seed", data_seed, "generator seed");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(config, seed, out, quiet);
    if (*ablate) return cmd_ablate(config, modes, out, quiet);
    if (*verify) return cmd_verify(corrupt, json);
    if (*gen) return cmd_gen_data(kind, data_out, n, length, horizon, noise, missing_rate, data_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
