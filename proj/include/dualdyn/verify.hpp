#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualdyn/gradcheck.hpp"
#include "dualdyn/model.hpp"

namespace dualdyn {

struct PropertyResult {
  std::string family;
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerificationReport {
  std::vector<PropertyResult> results;

  bool passed() const {
    return std::all_of(results.begin(), results.end(), [](const PropertyResult& r) { return r.passed; });
  }
  std::set<std::string> families() const {
    std::set<std::string> f;
    for (const auto& r : results) f.insert(r.family);
    return f;
  }
  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : results)
      rows.push_back({{"family", r.family}, {"property", r.name}, {"passed", r.passed}, {"detail", r.detail}});
    return {{"passed", passed()}, {"families", families().size()}, {"properties", rows}};
  }
};

struct VerifyOptions {
  bool corrupt_spectral_norm = false;  // negative control for the invertibility family
  std::size_t inverse_draws = 1000;
  std::size_t hutchinson_trials = 100;
  std::size_t hutchinson_probes = 100000;
  std::size_t gradient_seeds = 20;
  std::uint64_t seed = 2024;
};

/// Three short irregular series sharing one window, with a few missing
/// points, labels {0, 1, 0} and two-step forecast targets.
inline PreparedSplit toy_split(std::uint64_t seed, std::size_t n = 3, std::size_t d_x = 2) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::vector<double> times{0.0, 0.3, 0.5, 1.1, 1.4, 2.0};
  TimeSeriesBatch b;
  b.channels = d_x;
  b.num_classes = 2;
  for (std::size_t k = 0; k < n; ++k) {
    Series s;
    s.id = "toy" + std::to_string(k);
    s.times = times;
    s.values = Tensor(Shape{d_x, times.size()});
    s.mask = Mask(d_x, times.size(), true);
    s.held_out = Mask(d_x, times.size(), false);
    for (double& v : s.values.data()) v = normal(rng);
    const std::size_t hidden = 1 + (k + 1) % (times.size() - 2);
    s.mask.set(k % d_x, hidden, false);
    s.held_out.set(k % d_x, hidden, true);
    s.label = int(k % 2);
    s.horizon_times = {2.2, 2.5};
    s.horizon = Tensor(Shape{d_x, 2});
    for (double& v : s.horizon.data()) v = normal(rng);
    b.series.push_back(std::move(s));
  }
  return PreparedSplit::build(std::move(b));
}

/// Moves every parameter off its initial value (zero-initialized last
/// layers included) so gradient checks exercise every path.
inline void jitter_parameters(ParameterStore& store, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  for (auto& [name, t] : store.all())
    for (double& v : t.data()) v += normal(rng);
}

/// Max relative error between reverse-mode and central-difference
/// gradients of the model loss on one batch.
inline double model_gradient_error(const DualModel& model, const ModelBatch& batch, double eps = 1e-5,
                                   double floor = 1e-6) {
  ad::Graph g;
  const Bindings p = model.parameters().bind(g);
  const ad::Var loss = model.loss(g, p, batch);
  const Tensor analytic = ParameterStore::flatten(g.backward(loss));
  DualModel probe = model;
  auto f = [&](const Tensor& flat) {
    probe.parameters().unflatten(flat);
    ad::Graph gg;
    const Bindings pp = probe.parameters().bind_constants(gg);
    return probe.loss(gg, pp, batch).value().item();
  };
  const Tensor numeric = finite_difference_grad(f, model.parameters().flatten(), eps);
  return max_relative_error(analytic, numeric, floor * roundoff_scale(loss.value().item(), analytic));
}

/// A flow with freshly drawn parameters; resnet/gru weights are put under
/// their spectral bound unless `corrupt` inflates them afterwards.
inline std::pair<FlowModule, ParameterStore> random_flow(FlowKind kind, std::size_t dim, std::uint64_t seed,
                                                         bool corrupt = false, std::size_t depth = 2) {
  FlowOptions o;
  o.kind = kind;
  o.dim = dim;
  o.depth = depth;
  o.hidden = 16;
  FlowModule flow("flow", o);
  ParameterStore store;
  Rng rng(seed);
  flow.init(store, rng);
  // Xavier init leaves coupling layers close to identity; widen the draw.
  if (kind == FlowKind::coupling) jitter_parameters(store, seed ^ 0x5bd1e995, 0.5);
  if (corrupt)
    for (const auto& w : flow.constrained_weights())
      for (double& v : store.at(w).data()) v *= 8.0;
  return {std::move(flow), std::move(store)};
}

/// Max over draws of |G^{-1}(t, G(t, z)) - z|_inf, t in [0, 3], z in [-2, 2]^d.
/// A failed inverse counts as an infinite error.
inline double flow_round_trip_error(FlowKind kind, std::size_t dim, std::size_t draws, std::uint64_t seed,
                                    bool corrupt = false) {
  Rng rng(seed);
  std::uniform_real_distribution<double> ut(0.0, 3.0), uz(-2.0, 2.0);
  double worst = 0.0;
  for (std::size_t k = 0; k < draws; ++k) {
    auto [flow, store] = random_flow(kind, dim, rng(), corrupt);
    std::vector<double> z(dim);
    for (double& v : z) v = uz(rng);
    const double t = ut(rng);
    try {
      const auto y = flow_forward(flow, store, t, z).value;
      const auto x = flow_inverse(flow, store, t, y);
      for (std::size_t i = 0; i < dim; ++i) worst = std::max(worst, std::abs(x[i] - z[i]));
    } catch (const Error&) {
      return std::numeric_limits<double>::infinity();
    }
    if (!std::isfinite(worst)) return worst;
  }
  return worst;
}

/// Empirical Lipschitz constant of the resnet residual φ(t)·g(t, ·) over random pairs.
inline double resnet_residual_lipschitz(std::size_t pairs, std::uint64_t seed, bool corrupt = false) {
  Rng rng(seed);
  std::uniform_real_distribution<double> ut(0.0, 3.0), uz(-2.0, 2.0), small(-0.5, 0.5);
  const std::size_t dim = 4;
  auto [flow, store] = random_flow(FlowKind::resnet, dim, rng(), corrupt, 1);
  double worst = 0.0;
  for (std::size_t k = 0; k < pairs; ++k) {
    const double t = ut(rng);
    std::vector<double> a(dim), b(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      a[i] = uz(rng);
      b[i] = a[i] + small(rng);
    }
    ad::Graph g;
    const Bindings p = store.bind_constants(g);
    const Tensor ra = flow.residual(p, 0, t, g.constant(Tensor::vector(a))).value();
    const Tensor rb = flow.residual(p, 0, t, g.constant(Tensor::vector(b))).value();
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      num += (ra[i] - rb[i]) * (ra[i] - rb[i]);
      den += (a[i] - b[i]) * (a[i] - b[i]);
    }
    if (den > 0.0) worst = std::max(worst, std::sqrt(num / den));
  }
  return worst;
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << v;
  return s.str();
}

struct Collector {
  VerificationReport& report;
  std::string family;

  void add(const std::string& name, bool ok, const std::string& detail) {
    report.results.push_back({family, name, ok, detail});
  }
  void guard(const std::string& name, const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      add(name, false, std::string("exception: ") + e.what());
    }
  }
};

}  // namespace detail

/**
 * Property families: gradients, invertibility, density, hutchinson,
 * solver, spline, contraction, determinism. Every property yields one
 * verdict; the report passes only if all do.
 */
inline VerificationReport run_verification_suite(const VerifyOptions& opt = {}) {
  VerificationReport report;
  const std::uint64_t seed = opt.seed;

  {
    detail::Collector c{report, "gradients"};
    c.guard("model gradients match finite differences (12 backbone x flow combinations)", [&] {
      double worst = 0.0;
      for (BackboneKind bk : {BackboneKind::ode, BackboneKind::cde, BackboneKind::sde})
        for (FlowKind fk : {FlowKind::resnet, FlowKind::gru, FlowKind::coupling, FlowKind::mlp}) {
          ModelSpec s;
          s.backbone = bk;
          s.flow = fk;
          s.d_z = 4;
          s.n_h = 16;
          s.n_l = 1;
          s.seed = seed;
          DualModel m(s);
          jitter_parameters(m.parameters(), seed + 1);
          const PreparedSplit split = toy_split(seed);
          const std::size_t idx[] = {0, 1, 2};
          const ModelBatch batch = make_batch(split, idx, Task::classify, 2, seed);
          worst = std::max(worst, model_gradient_error(m, batch));
        }
      c.add("model gradients match finite differences (12 backbone x flow combinations)", worst < 1e-4,
            "max rel error " + detail::fmt(worst));
    });
    c.guard("backward is linear in the loss", [&] {
      Rng rng(seed);
      std::normal_distribution<double> normal;
      Tensor w(Shape{3, 4}), x(Shape{4});
      for (double& v : w.data()) v = normal(rng);
      for (double& v : x.data()) v = normal(rng);
      auto grad_of = [&](double a, double b) {
        ad::Graph g;
        ad::Var W = g.parameter("w", w);
        ad::Var X = g.constant(x);
        ad::Var y = ad::tanh(ad::affine(X, W, g.constant(Tensor(Shape{3}, 0.1))));
        ad::Var l1 = ad::sum(ad::square(y));
        ad::Var l2 = ad::mean(ad::exp(y));
        return g.backward(ad::add(ad::scale(l1, a), ad::scale(l2, b))).at("w");
      };
      const Tensor g1 = grad_of(1, 0), g2 = grad_of(0, 1), gc = grad_of(2.5, -1.5);
      double worst = 0.0;
      for (std::size_t i = 0; i < gc.numel(); ++i) worst = std::max(worst, std::abs(gc[i] - (2.5 * g1[i] - 1.5 * g2[i])));
      c.add("backward is linear in the loss", worst < 1e-12, "max abs deviation " + detail::fmt(worst));
    });
  }

  {
    detail::Collector c{report, "invertibility"};
    for (FlowKind fk : {FlowKind::coupling, FlowKind::resnet, FlowKind::gru}) {
      const std::string name = "round trip " + to_string(fk);
      c.guard(name, [&] {
        const double bound = fk == FlowKind::coupling ? 1e-8 : 1e-6;
        const double err = flow_round_trip_error(fk, 4, opt.inverse_draws, seed + 7, opt.corrupt_spectral_norm);
        c.add(name, err < bound, "max error " + detail::fmt(err) + " over " + std::to_string(opt.inverse_draws) + " draws");
      });
    }
    c.guard("identity at t = 0", [&] {
      double worst = 0.0;
      for (FlowKind fk : {FlowKind::coupling, FlowKind::resnet, FlowKind::gru}) {
        auto [flow, store] = random_flow(fk, 5, seed + 11);
        const std::vector<double> z{0.3, -1.2, 2.0, 0.7, -0.1};
        const auto y = flow_forward(flow, store, 0.0, z).value;
        for (std::size_t i = 0; i < z.size(); ++i) worst = std::max(worst, std::abs(y[i] - z[i]));
      }
      c.add("identity at t = 0", worst == 0.0, "max deviation " + detail::fmt(worst));
    });
    c.guard("mlp decoder refuses inversion", [&] {
      auto [flow, store] = random_flow(FlowKind::mlp, 3, seed);
      bool refused = false;
      try {
        flow_inverse(flow, store, 1.0, std::vector<double>{0.0, 0.0, 0.0});
      } catch (const UnsupportedError&) {
        refused = true;
      }
      c.add("mlp decoder refuses inversion", refused, refused ? "unsupported" : "inverse returned a value");
    });
  }

  {
    detail::Collector c{report, "density"};
    c.guard("coupling ledger equals finite-difference log-det", [&] {
      double worst = 0.0;
      Rng rng(seed + 3);
      std::uniform_real_distribution<double> ut(0.1, 3.0), uz(-2.0, 2.0);
      for (std::size_t d : {2u, 4u, 6u})
        for (int k = 0; k < 10; ++k) {
          auto [flow, store] = random_flow(FlowKind::coupling, d, rng());
          std::vector<double> z(d);
          for (double& v : z) v = uz(rng);
          const double t = ut(rng);
          const auto r = flow_forward(flow, store, t, z);
          worst = std::max(worst, std::abs(r.ledger.log_det.at(0) - exact_logdet(flow, store, t, z)));
        }
      c.add("coupling ledger equals finite-difference log-det", worst < 1e-6, "max abs diff " + detail::fmt(worst));
    });
    c.guard("uniform pushforward integrates to one", [&] {
      // Linear coupling: u and v constant, so the image of [0,1]^2 is a box
      // [0, e^s] x [0, 1] shifted by v, of area e^s, with density e^{-s}.
      FlowOptions o;
      o.kind = FlowKind::coupling;
      o.dim = 2;
      o.depth = 1;
      FlowModule flow("flow", o);
      ParameterStore store;
      Rng rng(seed);
      flow.init(store, rng);
      for (auto& [name, t] : store.all()) std::fill(t.data().begin(), t.data().end(), 0.0);
      store.at("flow.u0.b1")[0] = 0.9;
      store.at("flow.v0.b1")[0] = -0.4;
      store.at("flow.phi_u0")[0] = 1.0;
      store.at("flow.phi_v0")[0] = 1.0;
      const double t = 1.3;
      const auto lo = flow_forward(flow, store, t, std::vector<double>{0.0, 0.0});
      const auto hi = flow_forward(flow, store, t, std::vector<double>{1.0, 1.0});
      const double area = (hi.value[0] - lo.value[0]) * (hi.value[1] - lo.value[1]);
      const double density = std::exp(-lo.ledger.log_det.at(0));
      const double mass = area * density;
      c.add("uniform pushforward integrates to one", std::abs(mass - 1.0) < 1e-12, "mass " + detail::fmt(mass));
    });
  }

  {
    detail::Collector c{report, "hutchinson"};
    c.guard("exact on diagonal matrices", [&] {
      Rng rng(seed);
      const std::vector<double> diag{1.0, 2.0, 3.0};
      auto mvp = [&](std::span<const double> v) {
        std::vector<double> out(3);
        for (std::size_t i = 0; i < 3; ++i) out[i] = diag[i] * v[i];
        return out;
      };
      const auto est = hutchinson_trace(mvp, 3, 50, rng);
      c.add("exact on diagonal matrices", est.estimate == 6.0 && est.std_error == 0.0,
            "estimate " + detail::fmt(est.estimate) + ", std error " + detail::fmt(est.std_error));
    });
    c.guard("unbiased on random symmetric matrices", [&] {
      Rng rng(seed + 5);
      std::normal_distribution<double> normal;
      std::size_t hits = 0;
      const std::size_t n = 16;
      for (std::size_t trial = 0; trial < opt.hutchinson_trials; ++trial) {
        std::vector<double> a(n * n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j <= i; ++j) a[i * n + j] = a[j * n + i] = normal(rng);
        double trace = 0.0;
        for (std::size_t i = 0; i < n; ++i) trace += a[i * n + i];
        auto mvp = [&](std::span<const double> v) {
          std::vector<double> out(n, 0.0);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) out[i] += a[i * n + j] * v[j];
          return out;
        };
        const auto est = hutchinson_trace(mvp, n, opt.hutchinson_probes, rng);
        hits += std::abs(est.estimate - trace) <= 3.0 * est.std_error;
      }
      const std::size_t need = opt.hutchinson_trials - opt.hutchinson_trials / 100;
      c.add("unbiased on random symmetric matrices", hits >= need,
            std::to_string(hits) + "/" + std::to_string(opt.hutchinson_trials) + " within 3 standard errors");
    });
  }

  {
    detail::Collector c{report, "solver"};
    c.guard("explicit Euler is first order", [&] {
      std::vector<double> errors;
      for (double h : {0.1, 0.05, 0.025}) {
        std::vector<double> grid;
        const auto steps = std::size_t(std::lround(1.0 / h));
        for (std::size_t i = 0; i <= steps; ++i) grid.push_back(double(i) * h);
        ad::Graph g;
        const auto traj = euler_solve([](double, ad::Var z) { return ad::scale(z, -1.0); },
                                      g.constant(Tensor::vector({1.0})), grid);
        errors.push_back(std::abs(traj.final_state().value()[0] - std::exp(-1.0)));
      }
      const double p1 = std::log2(errors[0] / errors[1]), p2 = std::log2(errors[1] / errors[2]);
      c.add("explicit Euler is first order", p1 >= 0.8 && p1 <= 1.2 && p2 >= 0.8 && p2 <= 1.2,
            "orders " + detail::fmt(p1) + ", " + detail::fmt(p2));
    });
    c.guard("Euler-Maruyama with zero diffusion equals Euler", [&] {
      const PreparedSplit split = toy_split(seed);
      const std::size_t idx[] = {0, 1, 2};
      const ModelBatch batch = make_batch(split, idx, Task::classify, 2, seed);
      VectorField drift = VectorField::make("drift", 4, 1, 3, 16, 2);
      VectorField diffusion = VectorField::make("diffusion", 4, 1, 3, 16, 2);
      ParameterStore store;
      Rng rng(seed);
      drift.init(store, rng);
      diffusion.init(store, rng);
      jitter_parameters(store, seed + 9);
      for (const std::string& name : store.names())
        if (name.rfind("diffusion.", 0) == 0) std::fill(store.at(name).data().begin(), store.at(name).data().end(), 0.0);
      BackboneFields ode{BackboneKind::ode, drift, std::nullopt};
      BackboneFields sde{BackboneKind::sde, drift, diffusion};
      ad::Graph g;
      const Bindings p = store.bind_constants(g);
      const ad::Var z0 = g.constant(Tensor(Shape{3, 4}, 0.25));
      const BrownianSample noise = BrownianSample::generate(batch.grid, z0.shape(), seed);
      const auto a = run_backbone(ode, p, {batch.paths, nullptr}, z0, batch.grid);
      const auto b = run_backbone(sde, p, {batch.paths, &noise}, z0, batch.grid);
      bool same = a.size() == b.size();
      for (std::size_t i = 0; same && i < a.size(); ++i) same = a.states[i].value() == b.states[i].value();
      c.add("Euler-Maruyama with zero diffusion equals Euler", same, same ? "bit-identical" : "trajectories differ");
    });
  }

  {
    detail::Collector c{report, "spline"};
    Rng rng(seed + 13);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> normal;
    std::vector<double> times{0.0};
    for (int i = 1; i < 12; ++i) times.push_back(times.back() + 0.1 + u(rng));
    Tensor values(Shape{2, times.size()});
    for (double& v : values.data()) v = normal(rng);
    Mask mask(2, times.size(), true);
    mask.set(1, 4, false);
    mask.set(1, 7, false);
    c.guard("knot interpolation", [&] {
      const ControlPath path = fit_control_path(times, values, mask);
      double worst = 0.0;
      for (std::size_t i = 0; i < times.size(); ++i) {
        const auto x = path.eval(times[i]);
        for (std::size_t ch = 0; ch < 2; ++ch)
          if (mask(ch, i)) worst = std::max(worst, std::abs(x[ch] - values.at(ch, i)));
      }
      c.add("knot interpolation", worst <= 1e-12, "max error " + detail::fmt(worst));
    });
    c.guard("derivative matches central differences", [&] {
      const ControlPath path = fit_control_path(times, values, mask);
      double worst = 0.0;
      const double eps = 1e-6;
      for (int k = 0; k < 100; ++k) {
        double t = times.front() + (times.back() - times.front()) * u(rng);
        t = std::clamp(t, times.front() + 2 * eps, times.back() - 2 * eps);
        const auto d = path.derivative(t);
        const auto up = path.eval(t + eps), down = path.eval(t - eps);
        for (std::size_t ch = 0; ch < d.size(); ++ch)
          worst = std::max(worst, std::abs(d[ch] - (up[ch] - down[ch]) / (2 * eps)));
      }
      c.add("derivative matches central differences", worst <= 1e-5, "max error " + detail::fmt(worst));
    });
    c.guard("linear data reproduced exactly", [&] {
      Tensor lin(Shape{1, times.size()});
      for (std::size_t i = 0; i < times.size(); ++i) lin.at(0, i) = 2.0 * times[i] - 1.0;
      const ControlPath path = fit_control_path(times, lin, Mask(1, times.size(), true));
      double worst = 0.0;
      for (int k = 0; k < 100; ++k) {
        const double t = times.front() + (times.back() - times.front()) * u(rng);
        worst = std::max(worst, std::abs(path.eval(t)[0] - (2.0 * t - 1.0)));
      }
      c.add("linear data reproduced exactly", worst <= 1e-12, "max error " + detail::fmt(worst));
    });
  }

  {
    detail::Collector c{report, "contraction"};
    c.guard("resnet residual Lipschitz constant below one", [&] {
      const double lip = resnet_residual_lipschitz(10000, seed + 17, opt.corrupt_spectral_norm);
      c.add("resnet residual Lipschitz constant below one", lip < 1.0, "measured " + detail::fmt(lip));
    });
  }

  {
    detail::Collector c{report, "determinism"};
    c.guard("recording twice gives identical values and gradients", [&] {
      auto run = [&] {
        ModelSpec s;
        s.backbone = BackboneKind::sde;
        s.d_z = 4;
        s.seed = seed;
        DualModel m(s);
        const PreparedSplit split = toy_split(seed);
        const std::size_t idx[] = {0, 1, 2};
        const ModelBatch batch = make_batch(split, idx, Task::classify, 2, seed);
        ad::Graph g;
        const Bindings p = m.parameters().bind(g);
        const ad::Var loss = m.loss(g, p, batch);
        return std::make_pair(loss.value().item(), g.backward(loss));
      };
      const auto a = run(), b = run();
      const bool same = a.first == b.first && a.second == b.second;
      c.add("recording twice gives identical values and gradients", same, same ? "bit-identical" : "runs differ");
    });
  }
  return report;
}

}  // namespace dualdyn
