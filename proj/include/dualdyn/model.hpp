#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualdyn/data.hpp"
#include "dualdyn/flows.hpp"
#include "dualdyn/optim.hpp"
#include "dualdyn/solvers.hpp"

namespace dualdyn {

enum class Task { classify, interpolate, forecast };
enum class Mode { dual, backbone_only, flow_only, mlp_decoder, primary_latent };

inline std::string to_string(Task t) {
  switch (t) {
    case Task::classify: return "classify";
    case Task::interpolate: return "interpolate";
    case Task::forecast: return "forecast";
  }
  return "?";
}
inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::dual: return "dual";
    case Mode::backbone_only: return "backbone-only";
    case Mode::flow_only: return "flow-only";
    case Mode::mlp_decoder: return "mlp-decoder";
    case Mode::primary_latent: return "primary-latent";
  }
  return "?";
}
inline std::string to_string(BackboneKind k) {
  switch (k) {
    case BackboneKind::ode: return "ode";
    case BackboneKind::cde: return "cde";
    case BackboneKind::sde: return "sde";
  }
  return "?";
}
inline std::string to_string(FlowKind k) {
  switch (k) {
    case FlowKind::resnet: return "resnet";
    case FlowKind::gru: return "gru";
    case FlowKind::coupling: return "coupling";
    case FlowKind::mlp: return "mlp";
  }
  return "?";
}

namespace detail {
template <class E, std::size_t N>
E parse_enum(const std::string& s, const E (&all)[N], const char* what) {
  std::string valid;
  for (E e : all) {
    if (to_string(e) == s) return e;
    valid += (valid.empty() ? "" : ", ") + to_string(e);
  }
  throw Error(std::string("unknown ") + what + " '" + s + "' (valid: " + valid + ")");
}
}  // namespace detail

inline Task parse_task(const std::string& s) {
  static constexpr Task all[] = {Task::classify, Task::interpolate, Task::forecast};
  return detail::parse_enum(s, all, "task");
}
inline Mode parse_mode(const std::string& s) {
  static constexpr Mode all[] = {Mode::dual, Mode::backbone_only, Mode::flow_only, Mode::mlp_decoder,
                                 Mode::primary_latent};
  return detail::parse_enum(s, all, "mode");
}
inline BackboneKind parse_backbone(const std::string& s) {
  static constexpr BackboneKind all[] = {BackboneKind::ode, BackboneKind::cde, BackboneKind::sde};
  return detail::parse_enum(s, all, "backbone");
}
inline FlowKind parse_flow(const std::string& s) {
  static constexpr FlowKind all[] = {FlowKind::resnet, FlowKind::gru, FlowKind::coupling, FlowKind::mlp};
  return detail::parse_enum(s, all, "flow");
}

struct ModelSpec {
  Task task = Task::classify;
  BackboneKind backbone = BackboneKind::cde;
  FlowKind flow = FlowKind::coupling;
  Mode mode = Mode::dual;
  std::size_t d_x = 2;
  std::size_t d_z = 8;
  std::size_t n_h = 16;
  std::size_t n_l = 2;
  std::size_t num_classes = 2;
  std::size_t horizon = 10;
  std::size_t steps_per_interval = 2;
  double time_scale = 1.0;  // latest time the flow is queried at
  std::uint64_t seed = 0;

  bool operator==(const ModelSpec&) const = default;
};

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"task", to_string(s.task)},     {"backbone", to_string(s.backbone)}, {"flow", to_string(s.flow)},
          {"mode", to_string(s.mode)},     {"d_x", s.d_x},                      {"d_z", s.d_z},
          {"n_h", s.n_h},                  {"n_l", s.n_l},                      {"num_classes", s.num_classes},
          {"horizon", s.horizon},          {"steps_per_interval", s.steps_per_interval},
          {"time_scale", s.time_scale},    {"seed", s.seed}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.task = parse_task(j.at("task").get<std::string>());
  s.backbone = parse_backbone(j.at("backbone").get<std::string>());
  s.flow = parse_flow(j.at("flow").get<std::string>());
  s.mode = parse_mode(j.at("mode").get<std::string>());
  s.d_x = j.at("d_x").get<std::size_t>();
  s.d_z = j.at("d_z").get<std::size_t>();
  s.n_h = j.at("n_h").get<std::size_t>();
  s.n_l = j.at("n_l").get<std::size_t>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.horizon = j.at("horizon").get<std::size_t>();
  s.steps_per_interval = j.at("steps_per_interval").get<std::size_t>();
  s.time_scale = j.at("time_scale").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

/// A split with one fitted control path per series.
struct PreparedSplit {
  TimeSeriesBatch data;
  std::vector<ControlPath> paths;

  static PreparedSplit build(TimeSeriesBatch data) {
    validate_batch(data);
    PreparedSplit out;
    for (const Series& s : data.series) out.paths.push_back(fit_control_path(s.times, s.values, s.mask));
    out.data = std::move(data);
    return out;
  }
  std::size_t size() const { return paths.size(); }
};

/// Model-ready minibatch. Targets are laid out query-major:
/// column q * d_x + c holds channel c at query_times[q].
struct ModelBatch {
  std::vector<const ControlPath*> paths;
  Tensor x0;  // [B, d_x]
  std::vector<double> grid;
  std::vector<std::size_t> labels;
  std::vector<double> query_times;
  Tensor targets;
  Tensor target_mask;
  std::uint64_t noise_seed = 0;

  std::size_t size() const { return paths.size(); }
};

/// The batch points into `split`, which must outlive it.
ModelBatch make_batch(PreparedSplit&&, std::span<const std::size_t>, Task, std::size_t, std::uint64_t = 0) = delete;

inline ModelBatch make_batch(const PreparedSplit& split, std::span<const std::size_t> index, Task task,
                             std::size_t steps_per_interval, std::uint64_t noise_seed = 0) {
  if (index.empty()) throw Error("make_batch: empty batch");
  ModelBatch b;
  b.noise_seed = noise_seed;
  const std::size_t dx = split.data.channels;
  b.x0 = Tensor(Shape{index.size(), dx});
  std::set<double> knots;
  const Series& first = split.data.series.at(index[0]);
  for (std::size_t r = 0; r < index.size(); ++r) {
    const Series& s = split.data.series.at(index[r]);
    if (s.times.front() != first.times.front() || s.times.back() != first.times.back()) {
      throw Error("make_batch: series '" + s.id + "' does not share the batch observation window");
    }
    b.paths.push_back(&split.paths.at(index[r]));
    for (std::size_t c = 0; c < dx; ++c) b.x0.at(r, c) = s.values.at(c, 0);
    knots.insert(s.times.begin(), s.times.end());
    if (task == Task::classify) {
      if (s.label < 0) throw Error("make_batch: series '" + s.id + "' has no label");
      b.labels.push_back(std::size_t(s.label));
    }
  }
  const std::vector<double> knot_vec(knots.begin(), knots.end());
  b.grid = solver_grid(knot_vec, steps_per_interval);
  if (task == Task::interpolate) {
    b.query_times = knot_vec;
    const std::size_t Q = b.query_times.size();
    b.targets = Tensor(Shape{index.size(), Q * dx});
    b.target_mask = Tensor(Shape{index.size(), Q * dx});
    for (std::size_t r = 0; r < index.size(); ++r) {
      const Series& s = split.data.series[index[r]];
      for (std::size_t i = 0; i < s.length(); ++i) {
        const std::size_t q = std::size_t(std::lower_bound(knot_vec.begin(), knot_vec.end(), s.times[i]) - knot_vec.begin());
        for (std::size_t c = 0; c < dx; ++c) {
          if (!s.held_out(c, i)) continue;
          b.targets.at(r, q * dx + c) = s.values.at(c, i);
          b.target_mask.at(r, q * dx + c) = 1.0;
        }
      }
    }
  } else if (task == Task::forecast) {
    b.query_times = first.horizon_times;
    if (b.query_times.empty()) throw Error("make_batch: series '" + first.id + "' has no forecast horizon");
    const std::size_t H = b.query_times.size();
    b.targets = Tensor(Shape{index.size(), H * dx});
    b.target_mask = Tensor(Shape{index.size(), H * dx}, 1.0);
    for (std::size_t r = 0; r < index.size(); ++r) {
      const Series& s = split.data.series[index[r]];
      if (s.horizon_times != b.query_times) {
        throw Error("make_batch: series '" + s.id + "' has different horizon times");
      }
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t c = 0; c < dx; ++c) b.targets.at(r, h * dx + c) = s.horizon.at(c, h);
    }
  }
  return b;
}

struct TaskOutput {
  Task task = Task::classify;
  ad::Var value;  // logits [B, K] or predictions [B, Q * d_x]

  /// Row-wise softmax of the logits.
  Tensor probabilities() const {
    if (task != Task::classify) throw Error("probabilities: not a classification output");
    const Tensor& x = value.value();
    Tensor p(x.shape());
    const std::size_t rows = x.rows(), cols = x.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      double mx = x.at(r, 0);
      for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x.at(r, c));
      double z = 0.0;
      for (std::size_t c = 0; c < cols; ++c) z += (p.at(r, c) = std::exp(x.at(r, c) - mx));
      for (std::size_t c = 0; c < cols; ++c) p.at(r, c) /= z;
    }
    return p;
  }
};

/// Mean cross-entropy (classify) or masked mean squared error.
inline ad::Var task_loss(const TaskOutput& out, const ModelBatch& batch) {
  ad::Graph& g = out.value.graph();
  if (out.task == Task::classify) {
    if (batch.labels.size() != out.value.value().rows()) throw Error("task_loss: one label per row required");
    return ad::scale(ad::mean(ad::pick(ad::log_softmax(out.value), batch.labels)), -1.0);
  }
  if (batch.targets.shape() != out.value.shape() || batch.target_mask.shape() != out.value.shape()) {
    throw Error("task_loss: targets " + shape_str(batch.targets.shape()) + " do not match predictions " +
                shape_str(out.value.shape()));
  }
  double count = 0.0;
  for (double m : batch.target_mask.data()) count += m;
  if (count == 0.0) throw Error("task_loss: empty query mask");
  ad::Var err = ad::square(ad::sub(out.value, g.constant(batch.targets)));
  return ad::scale(ad::sum(ad::mul(err, g.constant(batch.target_mask))), 1.0 / count);
}

/**
 * Encoder h, backbone fields, aggregator k, flow G and readout head.
 *
 * Parameter names: encoder.*, drift.*, diffusion.*, aggregator.*, flow.*,
 * head.*. Which groups exist depends on the mode: backbone-only has no
 * aggregator or flow, flow-only has no backbone.
 */
class DualModel {
 public:
  explicit DualModel(ModelSpec spec) : spec_(spec) {
    if (spec_.d_x == 0 || spec_.d_z == 0 || spec_.n_h == 0 || spec_.n_l == 0) {
      throw Error("model: dimensions must be positive");
    }
    if (spec_.task == Task::classify && spec_.num_classes < 2) throw Error("model: need at least two classes");
    if (spec_.task == Task::forecast && spec_.horizon == 0) throw Error("model: forecast horizon must be positive");
    Rng rng(spec_.seed);
    const std::size_t dz = spec_.d_z, dx = spec_.d_x;
    encoder_ = Mlp{"encoder", {dx, dz}, false};
    encoder_.init(params_, rng);
    if (uses_backbone()) {
      const std::size_t channels = dx + 1;
      if (spec_.backbone == BackboneKind::cde) {
        fields_.drift = VectorField::make("drift", dz, channels, 0, spec_.n_h, spec_.n_l);
      } else {
        fields_.drift = VectorField::make("drift", dz, 1, channels, spec_.n_h, spec_.n_l);
      }
      fields_.kind = spec_.backbone;
      fields_.drift.init(params_, rng);
      if (spec_.backbone == BackboneKind::sde) {
        fields_.diffusion = VectorField::make("diffusion", dz, 1, channels, spec_.n_h, spec_.n_l);
        fields_.diffusion->init(params_, rng);
      }
    }
    if (uses_aggregator()) {
      aggregator_ = Mlp{"aggregator", {2 * dz, dz}, false};
      aggregator_->init(params_, rng);
    }
    if (has_flow()) {
      FlowOptions fo;
      fo.kind = spec_.mode == Mode::mlp_decoder ? FlowKind::mlp : spec_.flow;
      fo.dim = dz;
      fo.depth = spec_.n_l;
      fo.hidden = spec_.n_h;
      fo.time_scale = spec_.time_scale;
      flow_.emplace("flow", fo);
      flow_->init(params_, rng);
    }
    std::size_t out = dx;
    if (spec_.task == Task::classify) out = spec_.num_classes;
    if (spec_.task == Task::forecast && reads_primary()) out = spec_.horizon * dx;
    head_ = Mlp{"head", {dz, out}, false};
    head_.init(params_, rng);
  }

  const ModelSpec& spec() const { return spec_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }
  const std::optional<FlowModule>& flow() const { return flow_; }

  bool uses_backbone() const { return spec_.mode != Mode::flow_only; }
  bool uses_aggregator() const { return spec_.mode != Mode::backbone_only && spec_.mode != Mode::flow_only; }
  bool has_flow() const { return spec_.mode != Mode::backbone_only; }
  /// Head reads z rather than ẑ.
  bool reads_primary() const { return spec_.mode == Mode::backbone_only || spec_.mode == Mode::primary_latent; }

  void after_step() {
    if (flow_) flow_->renormalize(params_);
  }

  TaskOutput forward(ad::Graph& g, const Bindings& p, const ModelBatch& batch) const {
    if (batch.x0.cols() != spec_.d_x) {
      throw Error("model: expected " + std::to_string(spec_.d_x) + " channels, batch has " +
                  std::to_string(batch.x0.cols()));
    }
    const ad::Var z0 = encoder_(p, g.constant(batch.x0));
    std::optional<LatentTrajectory> traj;
    if (uses_backbone()) {
      std::optional<BrownianSample> noise;
      if (spec_.backbone == BackboneKind::sde) {
        noise = BrownianSample::generate(batch.grid, z0.shape(), batch.noise_seed);
      }
      const BackboneInput input{batch.paths, noise ? &*noise : nullptr};
      traj = run_backbone(fields_, p, input, z0, batch.grid);
    }
    auto z_at = [&](double tau) {
      const auto& times = traj->grid_times;
      auto it = std::lower_bound(times.begin(), times.end(), tau - 1e-12);
      if (it == times.end() || std::abs(*it - tau) > 1e-12) {
        throw Error("model: z(t) is only available on the solver grid, t=" + std::to_string(tau));
      }
      return traj->states[std::size_t(it - times.begin())];
    };
    ad::Var zhat0 = z0;
    if (aggregator_) {
      ad::Var acc = traj->states.front();
      for (std::size_t i = 1; i < traj->size(); ++i) acc = ad::add(acc, traj->states[i]);
      const ad::Var mean = ad::scale(acc, 1.0 / double(traj->size()));
      zhat0 = (*aggregator_)(p, ad::concat({mean, traj->final_state()}));
    }
    auto latent_at = [&](double tau) { return reads_primary() ? z_at(tau) : flow_->forward(p, tau, zhat0).value; };

    TaskOutput out{spec_.task, {}};
    const double T = batch.grid.back();
    if (spec_.task == Task::classify) {
      out.value = head_(p, latent_at(T));
    } else if (spec_.task == Task::forecast && reads_primary()) {
      if (batch.query_times.size() != spec_.horizon) throw Error("model: batch horizon does not match the head");
      out.value = head_(p, traj->final_state());
    } else {
      if (batch.query_times.empty()) throw Error("model: no query times");
      std::vector<ad::Var> parts;
      for (double tau : batch.query_times) parts.push_back(head_(p, latent_at(tau)));
      out.value = ad::concat(parts);
    }
    return out;
  }

  ad::Var loss(ad::Graph& g, const Bindings& p, const ModelBatch& batch) const {
    return task_loss(forward(g, p, batch), batch);
  }

 private:
  ModelSpec spec_;
  ParameterStore params_;
  Mlp encoder_;
  BackboneFields fields_;
  std::optional<Mlp> aggregator_;
  std::optional<FlowModule> flow_;
  Mlp head_;
};

/// Same architecture with a different mode. Parameters whose name and shape
/// exist in both models are copied from `base`; the rest keep their fresh
/// initialization.
inline DualModel ablation_variant(const DualModel& base, Mode mode) {
  ModelSpec spec = base.spec();
  spec.mode = mode;
  DualModel out(spec);
  for (auto& [name, value] : out.parameters().all()) {
    if (!base.parameters().contains(name)) continue;
    const Tensor& src = base.parameters().at(name);
    if (src.shape() == value.shape()) value = src;
  }
  return out;
}

inline DualModel ablation_variant(const DualModel& base, const std::string& mode) {
  return ablation_variant(base, parse_mode(mode));
}

/// Area under the ROC curve from the rank statistic, ties sharing the mean
/// rank. Absent when only one class is present.
inline std::optional<double> auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error("auroc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  double n_pos = 0.0, n_neg = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      n_pos += 1.0;
      rank_sum += rank[i];
    } else {
      n_neg += 1.0;
    }
  }
  if (n_pos == 0.0 || n_neg == 0.0) return std::nullopt;
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

struct Metrics {
  double loss = 0.0;
  std::optional<double> accuracy;
  std::optional<double> auroc;
  std::optional<double> mse;

  bool operator==(const Metrics&) const = default;
};

inline nlohmann::json to_json(const Metrics& m) {
  nlohmann::json j{{"loss", m.loss}};
  j["accuracy"] = m.accuracy ? nlohmann::json(*m.accuracy) : nlohmann::json(nullptr);
  j["auroc"] = m.auroc ? nlohmann::json(*m.auroc) : nlohmann::json(nullptr);
  j["mse"] = m.mse ? nlohmann::json(*m.mse) : nlohmann::json(nullptr);
  return j;
}

/// Metrics over a whole split, evaluated in fixed-order batches.
inline Metrics evaluate(const DualModel& model, const PreparedSplit& split, std::size_t batch_size = 64,
                        std::uint64_t noise_seed = 0) {
  if (split.size() == 0) throw Error("evaluate: empty split");
  const ModelSpec& spec = model.spec();
  double loss_sum = 0.0, sq_sum = 0.0, count = 0.0;
  std::size_t correct = 0;
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(split.size(), start + batch_size); ++i) idx.push_back(i);
    const ModelBatch batch = make_batch(split, idx, spec.task, spec.steps_per_interval, noise_seed + start);
    ad::Graph g;
    const Bindings p = model.parameters().bind_constants(g);
    const TaskOutput out = model.forward(g, p, batch);
    if (spec.task == Task::classify) {
      const Tensor prob = out.probabilities();
      const ad::Var l = task_loss(out, batch);
      loss_sum += l.value().item() * double(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < prob.cols(); ++c)
          if (prob.at(r, c) > prob.at(r, best)) best = c;
        correct += best == batch.labels[r];
        scores.push_back(prob.at(r, prob.cols() > 1 ? 1 : 0));
        labels.push_back(int(batch.labels[r]));
      }
    } else {
      const Tensor& pred = out.value.value();
      for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double m = batch.target_mask[i];
        if (m == 0.0) continue;
        const double d = pred[i] - batch.targets[i];
        sq_sum += d * d;
        count += 1.0;
      }
    }
  }
  Metrics m;
  if (spec.task == Task::classify) {
    m.loss = loss_sum / double(split.size());
    m.accuracy = double(correct) / double(split.size());
    if (spec.num_classes == 2) m.auroc = auroc(scores, labels);
  } else {
    if (count == 0.0) throw Error("evaluate: split has no targets");
    m.mse = sq_sum / count;
    m.loss = *m.mse;
  }
  return m;
}

inline nlohmann::json checkpoint_json(const DualModel& model) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, t] : model.parameters().all()) params[name] = {{"shape", t.shape()}, {"data", t.data()}};
  return {{"format", "dualdyn-checkpoint"}, {"version", 1}, {"spec", to_json(model.spec())}, {"parameters", params}};
}

inline std::string checkpoint_string(const DualModel& model) { return checkpoint_json(model).dump(1); }

inline DualModel model_from_checkpoint(const nlohmann::json& j) {
  if (j.value("format", "") != "dualdyn-checkpoint") throw Error("checkpoint: not a dualdyn checkpoint");
  if (j.value("version", 0) != 1) throw Error("checkpoint: unsupported version");
  DualModel model(model_spec_from_json(j.at("spec")));
  const auto& params = j.at("parameters");
  if (params.size() != model.parameters().all().size()) {
    throw Error("checkpoint: has " + std::to_string(params.size()) + " parameters, model expects " +
                std::to_string(model.parameters().all().size()));
  }
  for (auto& [name, value] : model.parameters().all()) {
    if (!params.contains(name)) throw Error("checkpoint: missing parameter '" + name + "'");
    const auto shape = params[name].at("shape").get<Shape>();
    if (shape != value.shape()) {
      throw Error("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) + ", expected " +
                  shape_str(value.shape()));
    }
    auto data = params[name].at("data").get<std::vector<double>>();
    if (data.size() != value.numel()) throw Error("checkpoint: parameter '" + name + "' has wrong length");
    value = Tensor(shape, std::move(data));
  }
  return model;
}

inline void save_checkpoint(const DualModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("save_checkpoint: cannot open " + path);
  out << checkpoint_string(model);
}

inline DualModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("load_checkpoint: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("load_checkpoint: ") + e.what());
  }
  return model_from_checkpoint(j);
}

}  // namespace dualdyn
