#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "dualdyn/model.hpp"

namespace dualdyn {

struct DatasetSpec {
  std::string kind;  // spirals | oscillator | csv; empty = default for the task
  std::size_t n = 400;
  std::size_t length = 50;
  double noise_std = 0.05;
  std::size_t horizon = 10;
  std::string path;

  bool operator==(const DatasetSpec&) const = default;
};

struct ExperimentConfig {
  Task task = Task::classify;
  BackboneKind backbone = BackboneKind::cde;
  FlowKind flow = FlowKind::coupling;
  Mode mode = Mode::dual;
  double missing_rate = 0.0;
  std::size_t n_l = 2;
  std::size_t n_h = 16;
  std::size_t d_z = 8;
  double lr = 0.001;
  std::size_t batch_size = 32;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  std::size_t steps_per_interval = 2;
  DatasetSpec dataset;

  bool operator==(const ExperimentConfig&) const = default;

  std::string dataset_kind() const {
    if (!dataset.kind.empty()) return dataset.kind;
    return task == Task::classify ? "spirals" : "oscillator";
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& valid, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (std::find(valid.begin(), valid.end(), key) != valid.end()) continue;
    std::string list;
    for (const auto& v : valid) list += (list.empty() ? "" : ", ") + v;
    throw Error("config: unknown key '" + key + "' in " + where + " (valid keys: " + list + ")");
  }
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(std::string("config: key '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  if (c.n_l < 1 || c.n_l > 4) throw Error("config: n_l must be one of 1, 2, 3, 4");
  if (c.n_h != 16 && c.n_h != 32 && c.n_h != 64 && c.n_h != 128) {
    throw Error("config: n_h must be one of 16, 32, 64, 128 (got " + std::to_string(c.n_h) + ")");
  }
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw Error("config: lr must be positive");
  const double rates[] = {0.0, 0.3, 0.5, 0.7};
  if (std::none_of(std::begin(rates), std::end(rates), [&](double r) { return std::abs(r - c.missing_rate) < 1e-12; })) {
    throw Error("config: missing_rate must be one of 0.0, 0.3, 0.5, 0.7");
  }
  if (c.d_z == 0) throw Error("config: d_z must be positive");
  if (c.batch_size == 0) throw Error("config: batch_size must be positive");
  if (c.steps_per_interval == 0) throw Error("config: steps_per_interval must be positive");
  if (c.task == Task::interpolate && c.missing_rate == 0.0) {
    throw Error("config: interpolation needs missing_rate > 0 to have held-out targets");
  }
  const std::string kind = c.dataset_kind();
  if (kind != "spirals" && kind != "oscillator" && kind != "csv") {
    throw Error("config: dataset.kind must be spirals, oscillator or csv");
  }
  if (kind == "csv" && c.dataset.path.empty()) throw Error("config: dataset.path is required for csv data");
  if (kind == "spirals" && c.task != Task::classify) throw Error("config: spirals data only supports classify");
  if (kind == "oscillator" && c.task == Task::classify) throw Error("config: oscillator data has no labels");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error("config: top level must be a JSON object");
  detail::reject_unknown(j,
                         {"task", "backbone", "flow", "mode", "missing_rate", "n_l", "n_h", "d_z", "lr",
                          "batch_size", "epochs", "seed", "steps_per_interval", "dataset"},
                         "config");
  if (!j.contains("task")) throw Error("config: 'task' is required");
  ExperimentConfig c;
  c.task = parse_task(detail::get_or<std::string>(j, "task", ""));
  c.backbone = parse_backbone(detail::get_or<std::string>(j, "backbone", to_string(c.backbone)));
  c.flow = parse_flow(detail::get_or<std::string>(j, "flow", to_string(c.flow)));
  c.mode = parse_mode(detail::get_or<std::string>(j, "mode", to_string(c.mode)));
  c.missing_rate = detail::get_or(j, "missing_rate", c.missing_rate);
  c.n_l = detail::get_or(j, "n_l", c.n_l);
  c.n_h = detail::get_or(j, "n_h", c.n_h);
  c.d_z = detail::get_or(j, "d_z", c.d_z);
  c.lr = detail::get_or(j, "lr", c.lr);
  c.batch_size = detail::get_or(j, "batch_size", c.batch_size);
  c.epochs = detail::get_or(j, "epochs", c.epochs);
  c.seed = detail::get_or(j, "seed", c.seed);
  c.steps_per_interval = detail::get_or(j, "steps_per_interval", c.steps_per_interval);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    if (!d.is_object()) throw Error("config: dataset must be an object");
    detail::reject_unknown(d, {"kind", "n", "length", "noise_std", "horizon", "path"}, "dataset");
    c.dataset.kind = detail::get_or<std::string>(d, "kind", "");
    c.dataset.n = detail::get_or(d, "n", c.dataset.n);
    c.dataset.length = detail::get_or(d, "length", c.dataset.length);
    c.dataset.noise_std = detail::get_or(d, "noise_std", c.dataset.noise_std);
    c.dataset.horizon = detail::get_or(d, "horizon", c.dataset.horizon);
    c.dataset.path = detail::get_or<std::string>(d, "path", "");
  }
  validate(c);
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json d{{"kind", c.dataset_kind()}, {"n", c.dataset.n},           {"length", c.dataset.length},
                   {"noise_std", c.dataset.noise_std}, {"horizon", c.dataset.horizon}, {"path", c.dataset.path}};
  return {{"task", to_string(c.task)},
          {"backbone", to_string(c.backbone)},
          {"flow", to_string(c.flow)},
          {"mode", to_string(c.mode)},
          {"missing_rate", c.missing_rate},
          {"n_l", c.n_l},
          {"n_h", c.n_h},
          {"d_z", c.d_z},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"steps_per_interval", c.steps_per_interval},
          {"dataset", d}};
}

inline ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("config: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("config: invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

/// splitmix64 of seed and a stream tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum SeedStream : std::uint64_t { data_stream = 1, missing_stream, split_stream, model_stream, shuffle_stream, noise_stream };

/// SHA-1 of "blob <size>\0<content>", the hash git gives a file.
inline std::string git_blob_hash(const std::string& content) {
  const std::string blob = "blob " + std::to_string(content.size()) + std::string(1, '\0') + content;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw Error("git_blob_hash: digest failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

/// Data after generation or loading, missingness and the 70/15/15 split.
struct ExperimentData {
  Splits splits;
  std::size_t channels = 0;
  std::size_t num_classes = 0;
  std::size_t horizon = 0;
  double last_time = 1.0;  // latest observation or horizon time
};

inline ExperimentData prepare_data(const ExperimentConfig& c) {
  const std::string kind = c.dataset_kind();
  TimeSeriesBatch raw;
  if (kind == "spirals") {
    raw = gen_spirals(c.dataset.n, c.dataset.length, c.dataset.noise_std, derive_seed(c.seed, data_stream));
  } else if (kind == "oscillator") {
    raw = gen_damped_oscillator(c.dataset.n, c.dataset.length, c.dataset.horizon, derive_seed(c.seed, data_stream));
  } else {
    raw = load_csv(c.dataset.path);
    if (c.task == Task::forecast) raw = split_horizon(std::move(raw), c.dataset.horizon);
  }
  if (c.task == Task::classify && raw.num_classes < 2) throw Error("data: classification needs labeled data");
  raw = inject_missingness(std::move(raw), c.missing_rate, derive_seed(c.seed, missing_stream));
  validate_batch(raw);
  ExperimentData out;
  out.channels = raw.channels;
  out.num_classes = raw.num_classes;
  out.horizon = raw.series.front().horizon_times.size();
  out.last_time = 0.0;
  for (const Series& s : raw.series) {
    out.last_time = std::max(out.last_time, s.times.back());
    if (!s.horizon_times.empty()) out.last_time = std::max(out.last_time, s.horizon_times.back());
  }
  if (!(out.last_time > 0.0)) out.last_time = 1.0;
  out.splits = split(raw, derive_seed(c.seed, split_stream), c.task == Task::classify);
  return out;
}

inline ModelSpec model_spec(const ExperimentConfig& c, const ExperimentData& d) {
  ModelSpec s;
  s.task = c.task;
  s.backbone = c.backbone;
  s.flow = c.flow;
  s.mode = c.mode;
  s.d_x = d.channels;
  s.d_z = c.d_z;
  s.n_h = c.n_h;
  s.n_l = c.n_l;
  s.num_classes = std::max<std::size_t>(d.num_classes, 2);
  s.horizon = std::max<std::size_t>(d.horizon, 1);
  s.steps_per_interval = c.steps_per_interval;
  s.time_scale = d.last_time;
  s.seed = derive_seed(c.seed, model_stream);
  return s;
}

struct RunReport {
  ExperimentConfig config;
  std::string status = "ok";  // ok | diverged
  std::string error;
  std::vector<double> train_loss, val_loss;
  std::size_t best_epoch = 0;  // 1-based; 0 = untrained model
  std::optional<Metrics> test;
  double wall_clock_seconds = 0.0;
  std::size_t parameter_count = 0;
  std::string checkpoint_hash;
  std::vector<std::size_t> train_index, val_index, test_index;

  std::size_t epochs_run() const { return val_loss.size(); }
  bool ok() const { return status == "ok"; }
};

inline nlohmann::json to_json(const RunReport& r) {
  return {{"config", to_json(r.config)},
          {"status", r.status},
          {"error", r.error.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.error)},
          {"epochs_run", r.epochs_run()},
          {"train_loss", r.train_loss},
          {"val_loss", r.val_loss},
          {"best_epoch", r.best_epoch},
          {"test", r.test ? to_json(*r.test) : nlohmann::json(nullptr)},
          {"wall_clock_seconds", r.wall_clock_seconds},
          {"parameter_count", r.parameter_count},
          {"checkpoint_hash", r.checkpoint_hash},
          {"partition", {{"train", r.train_index}, {"val", r.val_index}, {"test", r.test_index}}}};
}

struct RunOptions {
  std::string out_dir;          // empty: write nothing
  std::ostream* log = nullptr;  // per-epoch progress
  std::size_t eval_batch_size = 128;
};

/**
 * Full protocol: data, missingness, split, training with per-epoch
 * validation, restore of the lowest-validation-loss parameters, test
 * evaluation. Divergence ends the run with status "diverged".
 */
inline RunReport run_experiment(const ExperimentConfig& config, const RunOptions& opts = {}) {
  validate(config);
  const auto t0 = std::chrono::steady_clock::now();
  RunReport report;
  report.config = config;
  const ExperimentData data = prepare_data(config);
  report.train_index = data.splits.train_index;
  report.val_index = data.splits.val_index;
  report.test_index = data.splits.test_index;
  const PreparedSplit train = PreparedSplit::build(data.splits.train);
  const PreparedSplit val = PreparedSplit::build(data.splits.val);
  const PreparedSplit test = PreparedSplit::build(data.splits.test);

  DualModel model(model_spec(config, data));
  report.parameter_count = model.parameters().count();
  ParameterStore best = model.parameters();
  double best_val = std::numeric_limits<double>::infinity();
  Optimizer optimizer(OptimizerKind::adam);
  const std::uint64_t eval_seed = derive_seed(config.seed, noise_stream);

  try {
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
      std::vector<std::size_t> order(train.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(derive_seed(derive_seed(config.seed, shuffle_stream), epoch));
      std::shuffle(order.begin(), order.end(), rng);
      double loss_sum = 0.0;
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        const std::span<const std::size_t> idx(order.data() + start, end - start);
        const std::uint64_t noise = derive_seed(derive_seed(config.seed, noise_stream), epoch * 100003 + start);
        const ModelBatch batch = make_batch(train, idx, config.task, config.steps_per_interval, noise);
        loss_sum += train_step(model, batch, optimizer, config.lr).loss * double(idx.size());
      }
      const Metrics vm = evaluate(model, val, opts.eval_batch_size, eval_seed);
      if (!std::isfinite(vm.loss)) throw DivergenceError("validation loss is not finite");
      report.train_loss.push_back(loss_sum / double(order.size()));
      report.val_loss.push_back(vm.loss);
      if (vm.loss < best_val) {
        best_val = vm.loss;
        best = model.parameters();
        report.best_epoch = epoch;
      }
      if (opts.log) {
        *opts.log << "epoch " << epoch << " train_loss " << report.train_loss.back() << " val_loss " << vm.loss
                  << '\n';
      }
    }
  } catch (const NonFiniteError& e) {
    report.status = "diverged";
    report.error = e.what();
  }
  model.parameters() = best;
  if (report.ok() || report.best_epoch > 0) report.test = evaluate(model, test, opts.eval_batch_size, eval_seed);
  const std::string checkpoint = checkpoint_string(model);
  report.checkpoint_hash = git_blob_hash(checkpoint);
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    const std::filesystem::path dir(opts.out_dir);
    std::ofstream(dir / "checkpoint.json") << checkpoint;
    std::ofstream(dir / "report.json") << to_json(report).dump(2) << '\n';
    std::ofstream csv(dir / "metrics.csv");
    csv.precision(17);
    csv << "epoch,train_loss,val_loss\n";
    for (std::size_t e = 0; e < report.epochs_run(); ++e)
      csv << e + 1 << ',' << report.train_loss[e] << ',' << report.val_loss[e] << '\n';
  }
  return report;
}

/// Headline test metric of a run: accuracy for classification, MSE otherwise.
inline double headline_metric(const RunReport& r) {
  if (!r.test) return std::numeric_limits<double>::quiet_NaN();
  return r.config.task == Task::classify ? r.test->accuracy.value_or(0.0) : r.test->mse.value_or(0.0);
}

struct AblationResult {
  std::vector<RunReport> reports;  // in the requested order
  nlohmann::json summary;          // rows ordered best first
};

inline std::vector<Mode> parse_modes(const std::string& list) {
  std::vector<Mode> modes;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) modes.push_back(parse_mode(item));
  }
  if (modes.empty()) throw Error("ablate: no modes given");
  return modes;
}

/// One run per mode with the config's seed, so data and partitions are shared.
inline AblationResult run_ablation_suite(const ExperimentConfig& config, const std::vector<Mode>& modes,
                                         const RunOptions& opts = {}) {
  AblationResult out;
  for (Mode m : modes) {
    ExperimentConfig c = config;
    c.mode = m;
    RunOptions o = opts;
    if (!opts.out_dir.empty()) o.out_dir = (std::filesystem::path(opts.out_dir) / to_string(m)).string();
    if (opts.log) *opts.log << "== mode " << to_string(m) << '\n';
    out.reports.push_back(run_experiment(c, o));
  }
  const bool higher_better = config.task == Task::classify;
  std::vector<std::size_t> order(out.reports.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ma = headline_metric(out.reports[a]), mb = headline_metric(out.reports[b]);
    if (std::isnan(ma) != std::isnan(mb)) return std::isnan(mb);
    return higher_better ? ma > mb : ma < mb;
  });
  const std::string metric = higher_better ? "accuracy" : "mse";
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const RunReport& r = out.reports[order[rank]];
    const double v = headline_metric(r);
    rows.push_back({{"rank", rank + 1},
                    {"mode", to_string(r.config.mode)},
                    {"status", r.status},
                    {metric, std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v)},
                    {"best_epoch", r.best_epoch},
                    {"parameter_count", r.parameter_count}});
  }
  out.summary = {{"metric", metric}, {"order", higher_better ? "descending" : "ascending"}, {"rows", rows}};
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    std::ofstream(std::filesystem::path(opts.out_dir) / "summary.json") << out.summary.dump(2) << '\n';
  }
  return out;
}

}  // namespace dualdyn
