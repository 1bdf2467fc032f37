#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dualdyn/params.hpp"
#include "dualdyn/spline.hpp"

namespace dualdyn {

enum class BackboneKind { ode, cde, sde };

/// Right-hand side evaluated on the tape: (t, z) -> value shaped like z.
using Field = std::function<ad::Var(double t, ad::Var z)>;

/// Primary latent z(t) on the solver grid. states[i] is a tape node shaped
/// like z0 ([d_z] or [batch, d_z]).
struct LatentTrajectory {
  std::vector<double> grid_times;
  std::vector<ad::Var> states;

  ad::Var initial() const { return states.front(); }
  ad::Var final_state() const { return states.back(); }
  std::size_t size() const { return states.size(); }

  /// grid_length x d_z values for one batch row.
  Tensor state_matrix(std::size_t row = 0) const {
    const std::size_t dz = states.front().value().cols();
    Tensor out(Shape{states.size(), dz});
    for (std::size_t i = 0; i < states.size(); ++i)
      for (std::size_t j = 0; j < dz; ++j) out.at(i, j) = states[i].value().at(row, j);
    return out;
  }
};

/// Brownian increments dW_i ~ N(0, t_{i+1} - t_i), one tensor per step.
struct BrownianSample {
  std::vector<Tensor> increments;

  static BrownianSample generate(std::span<const double> grid, const Shape& state_shape, std::uint64_t seed) {
    BrownianSample s;
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
      const double sd = std::sqrt(grid[i + 1] - grid[i]);
      Tensor dw(state_shape);
      for (double& v : dw.data()) v = sd * normal(rng);
      s.increments.push_back(std::move(dw));
    }
    return s;
  }
};

/// Union of knot times with every interval split into `steps_per_interval`
/// equal Euler steps.
inline std::vector<double> solver_grid(std::span<const double> knots, std::size_t steps_per_interval = 2) {
  if (knots.size() < 2) throw Error("solver_grid: need at least two knots");
  if (steps_per_interval < 1) throw Error("solver_grid: steps_per_interval must be >= 1");
  std::vector<double> grid{knots.front()};
  for (std::size_t i = 0; i + 1 < knots.size(); ++i) {
    const double a = knots[i], b = knots[i + 1];
    if (!(b > a)) throw Error("solver_grid: knots not strictly increasing");
    for (std::size_t s = 1; s < steps_per_interval; ++s) grid.push_back(a + (b - a) * double(s) / double(steps_per_interval));
    grid.push_back(b);
  }
  return grid;
}

namespace detail {

inline void check_state(const ad::Var& z, std::size_t step, const char* solver) {
  if (!z.value().all_finite()) {
    throw NonFiniteError(std::string(solver) + ": non-finite state at step " + std::to_string(step));
  }
}

inline void check_grid(std::span<const double> grid, const char* solver) {
  if (grid.size() < 2) throw Error(std::string(solver) + ": grid needs at least two points");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] > grid[i - 1])) throw Error(std::string(solver) + ": grid not increasing");
  }
}

}  // namespace detail

/// Explicit Euler: z_{i+1} = z_i + (t_{i+1} - t_i) f(t_i, z_i), all on the tape.
inline LatentTrajectory euler_solve(const Field& field, ad::Var z0, std::span<const double> grid) {
  detail::check_grid(grid, "euler_solve");
  LatentTrajectory traj;
  traj.grid_times.assign(grid.begin(), grid.end());
  traj.states.push_back(z0);
  ad::Var z = z0;
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    ad::Var dz = field(grid[i], z);
    if (dz.shape() != z.shape()) {
      throw Error("euler_solve: field returned " + shape_str(dz.shape()) + " for state " + shape_str(z.shape()));
    }
    z = ad::add(z, ad::scale(dz, grid[i + 1] - grid[i]));
    detail::check_state(z, i + 1, "euler_solve");
    traj.states.push_back(z);
  }
  return traj;
}

/// Euler-Maruyama with diagonal noise: z_{i+1} = z_i + Δt drift + diffusion ⊙ ΔW_i.
/// The increments are fixed inputs, so gradients are pathwise.
inline LatentTrajectory euler_maruyama_solve(const Field& drift, const Field& diffusion, ad::Var z0,
                                             std::span<const double> grid, const BrownianSample& noise) {
  detail::check_grid(grid, "euler_maruyama_solve");
  if (noise.increments.size() != grid.size() - 1) {
    throw Error("euler_maruyama_solve: " + std::to_string(noise.increments.size()) + " increments for " +
                std::to_string(grid.size() - 1) + " steps");
  }
  ad::Graph& g = z0.graph();
  LatentTrajectory traj;
  traj.grid_times.assign(grid.begin(), grid.end());
  traj.states.push_back(z0);
  ad::Var z = z0;
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    if (noise.increments[i].shape() != z.shape()) {
      throw Error("euler_maruyama_solve: increment shape " + shape_str(noise.increments[i].shape()) +
                  " does not match state " + shape_str(z.shape()));
    }
    ad::Var mu = drift(grid[i], z);
    ad::Var sigma = diffusion(grid[i], z);
    ad::Var next = ad::add(z, ad::scale(mu, grid[i + 1] - grid[i]));
    z = ad::add(next, ad::mul(sigma, g.constant(noise.increments[i])));
    detail::check_state(z, i + 1, "euler_maruyama_solve");
    traj.states.push_back(z);
  }
  return traj;
}

/// Values (or derivatives) of a batch of paths at t, as [batch, channels].
inline Tensor stack_paths(std::span<const ControlPath* const> paths, double t, bool derivative) {
  if (paths.empty()) throw Error("stack_paths: no paths");
  const std::size_t channels = paths.front()->channel_count();
  Tensor out(Shape{paths.size(), channels});
  for (std::size_t b = 0; b < paths.size(); ++b) {
    if (paths[b]->channel_count() != channels) throw Error("stack_paths: paths disagree in channel count");
    paths[b]->eval_into(t, &out.data()[b * channels], derivative);
  }
  return out;
}

/// f(t, z) · dX/dt(t) for a batch; f returns [batch, d_z * channels].
inline ad::Var cde_effective_field(const Field& f, std::span<const ControlPath* const> paths, double t, ad::Var z) {
  const Tensor dxdt = stack_paths(paths, t, true);
  ad::Var m = f(t, z);
  const std::size_t channels = dxdt.cols();
  const std::size_t dz = z.value().cols();
  if (m.value().cols() != dz * channels || m.value().rows() != dxdt.rows()) {
    throw Error("cde_effective_field: field output " + shape_str(m.shape()) + " is not d_z x channels = " +
                std::to_string(dz) + " x " + std::to_string(channels));
  }
  if (z.value().rank() == 1) {
    return ad::row_matvec(m, z.graph().constant(Tensor::vector(dxdt.data())), dz);
  }
  return ad::row_matvec(m, z.graph().constant(dxdt), dz);
}

inline ad::Var cde_effective_field(const Field& f, const ControlPath& path, double t, ad::Var z) {
  const ControlPath* one[] = {&path};
  return cde_effective_field(f, std::span<const ControlPath* const>(one), t, z);
}

/**
 * Neural vector field: tanh MLP on concat(t, z, features) with a tanh
 * output of size state_dim * out_cols. out_cols > 1 gives the d_z x channels
 * matrix a controlled equation needs. The last layer starts at zero.
 */
struct VectorField {
  Mlp net;
  std::size_t state_dim = 0;
  std::size_t out_cols = 1;
  std::size_t feature_dim = 0;

  static VectorField make(const std::string& name, std::size_t state_dim, std::size_t out_cols,
                          std::size_t feature_dim, std::size_t hidden, std::size_t layers) {
    VectorField f;
    f.state_dim = state_dim;
    f.out_cols = out_cols;
    f.feature_dim = feature_dim;
    f.net.name = name;
    f.net.sizes.push_back(1 + state_dim + feature_dim);
    for (std::size_t i = 0; i < layers; ++i) f.net.sizes.push_back(hidden);
    f.net.sizes.push_back(state_dim * out_cols);
    f.net.tanh_output = true;
    return f;
  }

  void init(ParameterStore& store, Rng& rng) const { net.init(store, rng, true); }

  ad::Var operator()(const Bindings& p, double t, ad::Var z, std::optional<ad::Var> features = std::nullopt) const {
    ad::Graph& g = z.graph();
    const bool single = z.value().rank() == 1;
    ad::Var time = single ? g.constant(Tensor::vector({t})) : constant_column(g, z.value().rows(), t);
    std::vector<ad::Var> parts{time, z};
    if (feature_dim) {
      if (!features) throw Error("vector field '" + net.name + "': features required");
      parts.push_back(*features);
    }
    return net(p, ad::concat(parts));
  }
};

/// The implicit component's networks.
struct BackboneFields {
  BackboneKind kind = BackboneKind::cde;
  VectorField drift;
  std::optional<VectorField> diffusion;  // sde only
};

/// What a backbone is driven by. Controlled equations need the paths; the
/// ode/sde fields read the path values X(t) as features when given.
struct BackboneInput {
  std::span<const ControlPath* const> paths;
  const BrownianSample* noise = nullptr;
};

inline LatentTrajectory run_backbone(const BackboneFields& fields, const Bindings& p, const BackboneInput& input,
                                     ad::Var z0, std::span<const double> grid) {
  ad::Graph& g = z0.graph();
  const bool single = z0.value().rank() == 1;
  auto features = [&](double t) -> std::optional<ad::Var> {
    if (!fields.drift.feature_dim) return std::nullopt;
    if (input.paths.empty()) throw Error("run_backbone: field expects path features but no path was given");
    Tensor x = stack_paths(input.paths, t, false);
    if (single) x = Tensor::vector(x.data());
    return g.constant(std::move(x));
  };
  switch (fields.kind) {
    case BackboneKind::cde: {
      if (input.paths.empty()) throw Error("run_backbone: cde backbone requires a control path");
      Field f = [&](double t, ad::Var z) { return fields.drift(p, t, z); };
      return euler_solve([&](double t, ad::Var z) { return cde_effective_field(f, input.paths, t, z); }, z0, grid);
    }
    case BackboneKind::ode:
      return euler_solve([&](double t, ad::Var z) { return fields.drift(p, t, z, features(t)); }, z0, grid);
    case BackboneKind::sde: {
      if (!fields.diffusion) throw Error("run_backbone: sde backbone requires a diffusion field");
      if (!input.noise) throw Error("run_backbone: sde backbone requires a Brownian sample");
      return euler_maruyama_solve([&](double t, ad::Var z) { return fields.drift(p, t, z, features(t)); },
                                  [&](double t, ad::Var z) { return (*fields.diffusion)(p, t, z, features(t)); },
                                  z0, grid, *input.noise);
    }
  }
  throw Error("run_backbone: unknown backbone kind");
}

}  // namespace dualdyn
