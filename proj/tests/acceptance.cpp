#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>

#include <Eigen/Dense>

#include "dualdyn/dualdyn.hpp"

using namespace dualdyn;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << v;
  return s.str();
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << std::fixed << v;
  return s.str();
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::vector<double> uniform_grid(double T, std::size_t steps) {
  std::vector<double> g;
  for (std::size_t i = 0; i <= steps; ++i) g.push_back(T * double(i) / double(steps));
  return g;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

int run_cli(const std::string& args) {
  const char* cli = std::getenv("DUALDYN_CLI");
  if (!cli) throw Error("DUALDYN_CLI is not set");
  const int rc = std::system((std::string(cli) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// 1: reverse mode against central differences, every backbone x flow pair.
Verdict gradient_fidelity() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (BackboneKind bk : {BackboneKind::ode, BackboneKind::cde, BackboneKind::sde})
    for (FlowKind fk : {FlowKind::resnet, FlowKind::gru, FlowKind::coupling, FlowKind::mlp})
      for (Task task : {Task::classify, Task::interpolate, Task::forecast}) {
        ModelSpec s;
        s.backbone = bk;
        s.flow = fk;
        s.task = task;
        s.horizon = 2;
        s.d_z = 4;
        s.n_h = 16;
        s.seed = 11;
        DualModel m(s);
        jitter_parameters(m.parameters(), 12);
        const PreparedSplit split = toy_split(13);
        const std::size_t idx[] = {0, 1, 2};
        worst = std::max(worst, model_gradient_error(m, make_batch(split, idx, task, 2, 14)));
      }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120.0,
          "max rel error " + sci(worst) + " over 12 combinations x 3 tasks, " + fixed(secs, 1) + " s"};
}

// 2: round trips and identity at the origin.
Verdict invertibility() {
  const double coupling = flow_round_trip_error(FlowKind::coupling, 4, 1000, 21);
  const double resnet = flow_round_trip_error(FlowKind::resnet, 4, 1000, 22);
  const double gru = flow_round_trip_error(FlowKind::gru, 4, 1000, 23);
  double identity = 0.0;
  Rng rng(24);
  std::uniform_real_distribution<double> uz(-2.0, 2.0);
  for (FlowKind kind : {FlowKind::resnet, FlowKind::gru, FlowKind::coupling})
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      auto [flow, store] = random_flow(kind, 4, seed);
      std::vector<double> z(4);
      for (double& v : z) v = uz(rng);
      const auto y = flow_forward(flow, store, 0.0, z).value;
      for (std::size_t i = 0; i < 4; ++i) identity = std::max(identity, std::abs(y[i] - z[i]));
    }
  return {coupling < 1e-8 && resnet < 1e-6 && gru < 1e-6 && identity <= 1e-15,
          "coupling " + sci(coupling) + ", resnet " + sci(resnet) + ", gru " + sci(gru) + " over 1000 draws each; "
          "identity at t=0 deviation " + sci(identity)};
}

double fd_logdet(const FlowModule& flow, const ParameterStore& store, double t, const std::vector<double>& z) {
  const std::size_t d = z.size();
  const double eps = 1e-6;
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(static_cast<long>(d), static_cast<long>(d));
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> up = z, dn = z;
    up[j] += eps;
    dn[j] -= eps;
    const auto fu = flow_forward(flow, store, t, up).value, fd = flow_forward(flow, store, t, dn).value;
    for (std::size_t i = 0; i < d; ++i) J(long(i), long(j)) = (fu[i] - fd[i]) / (2 * eps);
  }
  return std::log(std::abs(J.determinant()));
}

// 3: analytic ledger against a numerical Jacobian, and the uniform pushforward.
Verdict density_accounting() {
  double worst = 0.0;
  Rng rng(31);
  std::uniform_real_distribution<double> ut(0.0, 3.0), uz(-2.0, 2.0);
  for (std::size_t d : {2, 4, 6})
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto [flow, store] = random_flow(FlowKind::coupling, d, 100 * d + seed);
      std::vector<double> z(d);
      for (double& v : z) v = uz(rng);
      const double t = ut(rng);
      const auto r = flow_forward(flow, store, t, z);
      if (!r.ledger.analytic) return {false, "coupling ledger is not analytic"};
      worst = std::max(worst, std::abs(r.ledger.log_det.at(0) - fd_logdet(flow, store, t, z)));
    }

  FlowOptions o;
  o.kind = FlowKind::coupling;
  o.dim = 2;
  o.depth = 1;
  o.hidden = 0;
  FlowModule flow("flow", o);
  ParameterStore store;
  Rng init(0);
  flow.init(store, init);
  for (auto& [name, t] : store.all()) std::fill(t.data().begin(), t.data().end(), 0.0);
  store.at("flow.u0.b0")[0] = std::log(3.0);
  for (double& w : store.at("flow.v0.w0").data()) w = 0.7;
  store.at("flow.v0.b0")[0] = -0.25;
  store.at("flow.phi_u0")[0] = 100.0;
  store.at("flow.phi_v0")[0] = 100.0;
  const std::vector<std::vector<double>> corners{{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  std::vector<std::vector<double>> image;
  double log_det = 0.0;
  for (const auto& c : corners) {
    const auto r = flow_forward(flow, store, 1.0, c);
    image.push_back(r.value);
    log_det = r.ledger.log_det.at(0);
  }
  double area = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto &a = image[i], &b = image[(i + 1) % 4];
    area += a[0] * b[1] - b[0] * a[1];
  }
  area = std::abs(area) / 2.0;
  const double mass = area * std::exp(-log_det);
  return {worst < 1e-6 && std::abs(mass - 1.0) <= 1e-12,
          "max |ledger - numerical log-det| " + sci(worst) + " for d in {2,4,6}; pushforward mass " +
              fixed(mass, 15)};
}

// 4: Hutchinson on diagonal and random symmetric matrices.
Verdict hutchinson() {
  Rng rng(41);
  std::vector<double> diag(16);
  for (std::size_t i = 0; i < 16; ++i) diag[i] = double(i) - 5.5;
  double direct_diag = 0.0;
  for (double v : diag) direct_diag += v;
  const auto est = hutchinson_trace(
      [&](std::span<const double> v) {
        std::vector<double> out(16);
        for (std::size_t i = 0; i < 16; ++i) out[i] = diag[i] * v[i];
        return out;
      },
      16, 50, rng);
  const bool diag_exact = est.estimate == direct_diag && est.std_error == 0.0;

  std::normal_distribution<double> normal;
  std::size_t hits = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::MatrixXd a(16, 16);
    for (long i = 0; i < 16; ++i)
      for (long j = 0; j <= i; ++j) a(i, j) = a(j, i) = normal(rng);
    const auto e = hutchinson_trace(
        [&](std::span<const double> v) {
          std::vector<double> out(16, 0.0);
          for (long i = 0; i < 16; ++i)
            for (long j = 0; j < 16; ++j) out[std::size_t(i)] += a(i, j) * v[std::size_t(j)];
          return out;
        },
        16, 100000, rng);
    hits += std::abs(e.estimate - a.trace()) <= 3.0 * e.std_error;
  }
  return {diag_exact && hits >= 99,
          std::string("diagonal ") + (diag_exact ? "exact" : "inexact") + "; " + std::to_string(hits) +
              "/100 random symmetric estimates within 3 standard errors"};
}

// 5: Euler order and Euler-Maruyama with zero diffusion.
Verdict solver_order() {
  auto err = [](double h) {
    ad::Graph g;
    const auto traj = euler_solve([](double, ad::Var z) { return ad::scale(z, -1.0); },
                                  g.constant(Tensor::vector({1.0})), uniform_grid(1.0, std::size_t(std::lround(1 / h))));
    return std::abs(traj.final_state().value()[0] - std::exp(-1.0));
  };
  const double e1 = err(0.1), e2 = err(0.05), e3 = err(0.025);
  const double p1 = std::log2(e1 / e2), p2 = std::log2(e2 / e3);

  ad::Graph g;
  const auto grid = uniform_grid(2.0, 40);
  Field drift = [](double t, ad::Var z) { return ad::shift(ad::scale(ad::tanh(z), -0.8), std::cos(t)); };
  Field zero = [](double, ad::Var z) { return ad::scale(z, 0.0); };
  const ad::Var z0 = g.constant(Tensor::vector({0.4, -1.0, 2.0}));
  const auto a = euler_solve(drift, z0, grid);
  const auto b = euler_maruyama_solve(drift, zero, z0, grid, BrownianSample::generate(grid, Shape{3}, 51));
  bool same = a.size() == b.size();
  for (std::size_t i = 0; same && i < a.size(); ++i) same = a.states[i].value() == b.states[i].value();
  return {p1 >= 0.8 && p1 <= 1.2 && p2 >= 0.8 && p2 <= 1.2 && same,
          "orders " + fixed(p1) + ", " + fixed(p2) + "; Euler-Maruyama zero diffusion " +
              (same ? "bit-identical" : "differs")};
}

// 6: spline knots, derivative and linear reproduction.
Verdict spline() {
  Rng rng(61);
  std::uniform_real_distribution<double> gap(0.05, 1.0), u(0.0, 1.0);
  std::normal_distribution<double> normal;
  std::vector<double> times{0.0};
  for (int i = 0; i < 20; ++i) times.push_back(times.back() + gap(rng));
  Tensor v(Shape{3, times.size()});
  for (double& x : v.data()) x = normal(rng);
  const ControlPath p = fit_control_path(times, v, Mask(3, times.size(), true));
  double knot = 0.0;
  for (std::size_t i = 0; i < times.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) knot = std::max(knot, std::abs(p.eval(times[i])[c] - v.at(c, i)));

  const double eps = 1e-6;
  double deriv = 0.0;
  for (int k = 0; k < 100; ++k) {
    const double t = std::clamp(times.back() * u(rng), 2 * eps, times.back() - 2 * eps);
    const auto d = p.derivative(t), up = p.eval(t + eps), dn = p.eval(t - eps);
    for (std::size_t c = 0; c < d.size(); ++c) deriv = std::max(deriv, std::abs(d[c] - (up[c] - dn[c]) / (2 * eps)));
  }

  Tensor lin(Shape{2, times.size()});
  for (std::size_t i = 0; i < times.size(); ++i) {
    lin.at(0, i) = 2.5 * times[i] - 1.0;
    lin.at(1, i) = -0.75 * times[i] + 3.0;
  }
  const ControlPath q = fit_control_path(times, lin, Mask(2, times.size(), true));
  double linear = 0.0;
  for (int k = 0; k < 200; ++k) {
    const double t = times.back() * u(rng);
    const auto x = q.eval(t), dx = q.derivative(t);
    linear = std::max({linear, std::abs(x[0] - (2.5 * t - 1.0)), std::abs(x[1] - (-0.75 * t + 3.0)),
                       std::abs(dx[0] - 2.5), std::abs(dx[1] + 0.75)});
  }
  return {knot <= 1e-12 && deriv <= 1e-5 && linear <= 1e-12,
          "knot error " + sci(knot) + ", derivative error " + sci(deriv) + ", linear error " + sci(linear)};
}

ExperimentConfig base_config(const std::string& json) { return config_from_json(nlohmann::json::parse(json)); }

// 7: spirals with half the points missing.
Verdict classification() {
  const auto t0 = Clock::now();
  ExperimentConfig c = base_config(
      R"({"task":"classify","backbone":"cde","flow":"coupling","missing_rate":0.5,"epochs":100,"lr":0.01,
          "dataset":{"kind":"spirals","n":400,"length":50,"noise_std":0.05}})");
  double dual = 0.0, flow_only = 0.0;
  double dual_secs = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    c.seed = seed;
    c.mode = Mode::dual;
    const auto t1 = Clock::now();
    const RunReport d = run_experiment(c);
    dual_secs += seconds_since(t1);
    c.mode = Mode::flow_only;
    const RunReport f = run_experiment(c);
    if (!d.ok() || !f.ok()) return {false, "run diverged at seed " + std::to_string(seed)};
    dual += headline_metric(d) / 5.0;
    flow_only += headline_metric(f) / 5.0;
  }
  return {dual >= 0.95 && dual >= flow_only && dual_secs < 600.0,
          "dual mean accuracy " + fixed(dual) + ", flow-only " + fixed(flow_only) + "; dual runs " +
              fixed(dual_secs, 1) + " s, total " + fixed(seconds_since(t0), 1) + " s"};
}

// 8: damped oscillator forecasting against the backbone-only head.
Verdict forecasting() {
  ExperimentConfig c = base_config(
      R"({"task":"forecast","backbone":"cde","flow":"gru","missing_rate":0.3,"epochs":100,"lr":0.01,
          "n_h":16,"d_z":8,"n_l":2,"dataset":{"kind":"oscillator","n":400,"length":50,"horizon":10}})");
  double dual = 0.0, backbone = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    c.seed = seed;
    c.mode = Mode::dual;
    const RunReport d = run_experiment(c);
    c.mode = Mode::backbone_only;
    const RunReport b = run_experiment(c);
    if (!d.ok() || !b.ok()) return {false, "run diverged at seed " + std::to_string(seed)};
    dual += headline_metric(d) / 5.0;
    backbone += headline_metric(b) / 5.0;
  }
  const double ratio = dual / backbone;
  return {dual <= 0.05 && ratio <= 1.1,
          "dual mean MSE " + fixed(dual) + ", backbone-only " + fixed(backbone) + ", ratio " + fixed(ratio, 3) +
              " (limit 1.1)"};
}

// 9: ablation through the CLI.
Verdict ablation() {
  const fs::path dir = fs::temp_directory_path() / "dualdyn_acceptance_ablate";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "config.json")
      << R"({"task":"classify","missing_rate":0.3,"epochs":5,"lr":0.01,"seed":3,"dataset":{"n":60,"length":20}})";
  const int rc = run_cli("ablate --quiet --config " + (dir / "config.json").string() +
                         " --modes dual,mlp-decoder,primary-latent --out " + (dir / "out").string());
  if (rc != 0) return {false, "ablate exited with " + std::to_string(rc)};
  const nlohmann::json ref = read_json(dir / "out" / "dual" / "report.json")["partition"];
  bool same = true;
  for (const char* m : {"mlp-decoder", "primary-latent"})
    same = same && read_json(dir / "out" / m / "report.json")["partition"] == ref;
  const nlohmann::json summary = read_json(dir / "out" / "summary.json");
  const bool summary_ok = summary["rows"].size() == 3 && summary["metric"] == "accuracy";

  const DualModel mlp = load_checkpoint((dir / "out" / "mlp-decoder" / "checkpoint.json").string());
  bool refused = false;
  try {
    flow_inverse(*mlp.flow(), mlp.parameters(), 0.5, std::vector<double>(mlp.spec().d_z, 0.1));
  } catch (const UnsupportedError&) {
    refused = true;
  }
  fs::remove_all(dir);
  return {same && summary_ok && refused, std::string("partitions ") + (same ? "identical" : "differ") + ", summary " +
                                             (summary_ok ? "ranks 3 modes" : "malformed") + ", mlp-decoder inverse " +
                                             (refused ? "refused" : "allowed")};
}

// 10: repeated train invocations.
Verdict determinism() {
  const fs::path dir = fs::temp_directory_path() / "dualdyn_acceptance_train";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << R"({"task":"forecast","backbone":"sde","flow":"resnet","missing_rate":0.3,
      "epochs":3,"lr":0.01,"dataset":{"n":40,"length":20,"horizon":5}})";
  std::vector<nlohmann::json> reports;
  for (const char* run : {"a", "b"}) {
    const int rc = run_cli("train --quiet --seed 9 --config " + (dir / "config.json").string() + " --out " +
                           (dir / run).string());
    if (rc != 0) return {false, "train exited with " + std::to_string(rc)};
    reports.push_back(read_json(dir / run / "report.json"));
  }
  fs::remove_all(dir);
  const bool same_test = reports[0]["test"].dump() == reports[1]["test"].dump();
  const bool same_ckpt = reports[0]["checkpoint_hash"] == reports[1]["checkpoint_hash"];
  return {same_test && same_ckpt && !reports[0]["test"].is_null(),
          std::string("test metrics ") + (same_test ? "bit-identical" : "differ") + ", checkpoint hash " +
              (same_ckpt ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Verdict()>> criteria{gradient_fidelity, invertibility, density_accounting, hutchinson,
                                                       solver_order,      spline,        classification,     forecasting,
                                                       ablation,          determinism};
  std::vector<bool> selected(criteria.size(), argc == 1);
  for (int a = 1; a < argc; ++a) {
    const int n = std::atoi(argv[a]);
    if (n >= 1 && std::size_t(n) <= criteria.size()) selected[std::size_t(n) - 1] = true;
  }
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected[i]) continue;
    Verdict v;
    try {
      v = criteria[i]();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    all = all && v.pass;
    std::cout << "criterion " << i + 1 << ": " << (v.pass ? "PASS" : "FAIL") << " (" << v.detail << ")" << std::endl;
  }
  return all ? 0 : 1;
}
