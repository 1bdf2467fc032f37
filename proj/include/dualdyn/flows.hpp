#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dualdyn/params.hpp"

namespace dualdyn {

enum class FlowKind { resnet, gru, coupling, mlp };

/// Raised by operations a flow kind cannot support (inverting the MLP decoder).
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

/// φ(t) = tanh(w t), one weight per output coordinate. φ(0) = 0 and |φ| < 1.
/// w starts in U[0.5, 1.5] / time_scale.
struct TimeEmbedding {
  std::string name;
  std::size_t dim = 0;
  double time_scale = 1.0;

  void init(ParameterStore& store, Rng& rng) const {
    std::uniform_real_distribution<double> dist(0.5 / time_scale, 1.5 / time_scale);
    Tensor w(Shape{dim});
    for (double& v : w.data()) v = dist(rng);
    store.add(name, std::move(w));
  }

  ad::Var operator()(const Bindings& p, double t) const { return ad::tanh(ad::scale(p(name), t)); }
};

struct FlowOptions {
  FlowKind kind = FlowKind::coupling;
  std::size_t dim = 0;
  std::size_t depth = 2;    // stacked blocks
  std::size_t hidden = 16;  // width of every sub-network; 0 = single affine map
  double gru_alpha = 2.0 / 5.0;
  double gru_beta = 4.0 / 5.0;
  double lipschitz_target = 0.97;  // bound on each residual map
  double time_scale = 1.0;         // typical query time; sub-networks see t / time_scale
};

/// log|det J| bookkeeping of one forward pass.
struct DensityLedger {
  std::vector<double> log_det;  // per sample; empty unless analytic
  bool analytic = false;
  struct TraceEstimate {
    double estimate = 0.0;
    double std_error = 0.0;
  };
  std::vector<TraceEstimate> trace_estimates;
};

/// Persistent right-singular-vector estimate for one weight matrix.
struct PowerIterationState {
  std::vector<double> v;
};

/**
 * W · min(1, target / σ̂) with σ̂ the power-iteration estimate of the largest
 * singular value. The state vector carries over between calls, so repeated
 * calls refine the estimate. A zero matrix is returned unchanged.
 */
inline Tensor spectral_normalize(const Tensor& W, int n_power_iters, double target, PowerIterationState& state,
                                 Rng& rng) {
  if (n_power_iters < 1) throw Error("spectral_normalize: need at least one power iteration");
  if (!(target > 0.0 && target <= 1.0)) throw Error("spectral_normalize: target must lie in (0, 1]");
  if (W.rank() != 2) throw Error("spectral_normalize: expected a matrix, got " + shape_str(W.shape()));
  const std::size_t m = W.shape()[0], n = W.shape()[1];
  if (std::all_of(W.data().begin(), W.data().end(), [](double x) { return x == 0.0; })) return W;
  auto normalize = [](std::vector<double>& x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    s = std::sqrt(s);
    if (s > 0.0)
      for (double& e : x) e /= s;
    return s;
  };
  if (state.v.size() != n) {
    std::normal_distribution<double> normal(0.0, 1.0);
    state.v.assign(n, 0.0);
    for (double& e : state.v) e = normal(rng);
    normalize(state.v);
  }
  std::vector<double> u(m), v = state.v;
  double sigma = 0.0;
  for (int it = 0; it < n_power_iters; ++it) {
    for (std::size_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += W[i * n + j] * v[j];
      u[i] = acc;
    }
    sigma = normalize(u);
    if (sigma == 0.0) break;
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < m; ++i) acc += W[i * n + j] * u[i];
      v[j] = acc;
    }
    normalize(v);
  }
  // σ̂ = |W v| for the final unit v.
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += W[i * n + j] * v[j];
    s += acc * acc;
  }
  sigma = std::sqrt(s);
  state.v = v;
  if (sigma <= target) return W;
  Tensor out = W;
  const double factor = target / sigma;
  for (double& e : out.data()) e *= factor;
  return out;
}

/**
 * Explicit component G(t, z): a stack of invertible time-conditioned blocks
 * (resnet, gru, coupling) or a plain MLP decoder for ablations.
 *
 * Parameters live in an external ParameterStore under `prefix`; the module
 * only holds the architecture and the power-iteration state used to keep
 * resnet/gru residual maps contractive.
 */
class FlowModule {
 public:
  struct Block {
    std::vector<Mlp> nets;                 // resnet: {g}; gru: {f1, f2, f3}; coupling: {u, v}
    std::vector<TimeEmbedding> embeddings; // resnet/gru: {φ}; coupling: {φ_u, φ_v}
    std::vector<std::size_t> transformed;  // coupling d1
    std::vector<std::size_t> conditioner;  // coupling d2
  };

  FlowModule() = default;

  FlowModule(std::string prefix, FlowOptions opts) : prefix_(std::move(prefix)), opts_(opts) {
    if (opts_.dim == 0) throw Error("flow: dimension must be positive");
    if (opts_.depth == 0) throw Error("flow: depth must be positive");
    if (!(opts_.time_scale > 0.0)) throw Error("flow: time_scale must be positive");
    const std::size_t d = opts_.dim, h = opts_.hidden;
    auto net = [&](const std::string& name, std::size_t in, std::size_t out) {
      if (h == 0) return Mlp{prefix_ + "." + name, {in, out}, false};
      return Mlp{prefix_ + "." + name, {in, h, out}, false};
    };
    if (opts_.kind == FlowKind::mlp) {
      Block b;
      Mlp m{prefix_ + ".mlp", {1 + d}, false};
      for (std::size_t i = 0; h > 0 && i < opts_.depth; ++i) m.sizes.push_back(h);
      m.sizes.push_back(d);
      b.nets.push_back(std::move(m));
      blocks_.push_back(std::move(b));
      return;
    }
    for (std::size_t k = 0; k < opts_.depth; ++k) {
      const std::string tag = std::to_string(k);
      Block b;
      switch (opts_.kind) {
        case FlowKind::resnet:
          b.nets.push_back(net("g" + tag, 1 + d, d));
          b.embeddings.push_back({prefix_ + ".phi" + tag, d, opts_.time_scale});
          break;
        case FlowKind::gru:
          b.nets.push_back(net("f1_" + tag, 1 + d, d));
          b.nets.push_back(net("f2_" + tag, 1 + d, d));
          b.nets.push_back(net("f3_" + tag, 1 + d, d));
          b.embeddings.push_back({prefix_ + ".phi" + tag, d, opts_.time_scale});
          break;
        case FlowKind::coupling: {
          // d1 alternates between even and odd coordinates across blocks.
          std::size_t parity = k % 2;
          if (d == 1) parity = 0;
          for (std::size_t i = 0; i < d; ++i) (i % 2 == parity ? b.transformed : b.conditioner).push_back(i);
          const std::size_t n1 = b.transformed.size(), n2 = b.conditioner.size();
          b.nets.push_back(net("u" + tag, 1 + n2, n1));
          b.nets.push_back(net("v" + tag, 1 + n2, n1));
          b.embeddings.push_back({prefix_ + ".phi_u" + tag, n1, opts_.time_scale});
          b.embeddings.push_back({prefix_ + ".phi_v" + tag, n1, opts_.time_scale});
          break;
        }
        case FlowKind::mlp:
          break;
      }
      blocks_.push_back(std::move(b));
    }
  }

  const FlowOptions& options() const { return opts_; }
  FlowKind kind() const { return opts_.kind; }
  std::size_t dim() const { return opts_.dim; }
  const std::string& prefix() const { return prefix_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  bool invertible() const { return opts_.kind != FlowKind::mlp; }

  /// Per-layer spectral bound c with c^L = lipschitz_target for an L-layer net.
  double layer_target(const Mlp& net) const { return std::pow(opts_.lipschitz_target, 1.0 / double(net.layers())); }

  void init(ParameterStore& store, Rng& rng) {
    for (const Block& b : blocks_) {
      for (const Mlp& n : b.nets) n.init(store, rng);
      for (const TimeEmbedding& e : b.embeddings) e.init(store, rng);
    }
    renormalize(store, 1000);
  }

  /// Weight matrices whose spectral norm is constrained.
  std::vector<std::string> constrained_weights() const {
    std::vector<std::string> out;
    if (opts_.kind != FlowKind::resnet && opts_.kind != FlowKind::gru) return out;
    for (const Block& b : blocks_)
      for (const Mlp& n : b.nets)
        for (std::size_t i = 0; i < n.layers(); ++i) out.push_back(n.weight(i));
    return out;
  }

  /// Projects every constrained weight back under its spectral bound.
  void renormalize(ParameterStore& store, int n_power_iters = 50) {
    for (const Block& b : blocks_) {
      if (opts_.kind != FlowKind::resnet && opts_.kind != FlowKind::gru) break;
      for (const Mlp& n : b.nets) {
        for (std::size_t i = 0; i < n.layers(); ++i) {
          const std::string w = n.weight(i);
          auto [it, fresh] = power_state_.try_emplace(w);
          Rng rng(std::hash<std::string>{}(w));
          store.at(w) = spectral_normalize(store.at(w), n_power_iters, layer_target(n), it->second, rng);
        }
      }
    }
  }

  struct Output {
    ad::Var value;
    std::optional<ad::Var> log_det;  // [batch] (or scalar-shaped [1]) for coupling flows
  };

  /// Taped forward pass on z of shape [dim] or [batch, dim].
  Output forward(const Bindings& p, double t, ad::Var z) const {
    if (z.value().cols() != opts_.dim) {
      throw Error("flow: expected state of width " + std::to_string(opts_.dim) + ", got " + shape_str(z.shape()));
    }
    Output out{z, std::nullopt};
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
      std::optional<ad::Var> block_logdet;
      out.value = block_forward(p, k, t, out.value, &block_logdet);
      if (!out.value.value().all_finite()) {
        throw NonFiniteError("flow: non-finite output in block " + std::to_string(k) + " (" + kind_name() + ")");
      }
      if (block_logdet) out.log_det = out.log_det ? ad::add(*out.log_det, *block_logdet) : *block_logdet;
    }
    return out;
  }

  /// Residual r(t, z) = block(t, z) - z of an invertible non-coupling block.
  ad::Var residual(const Bindings& p, std::size_t k, double t, ad::Var z) const {
    return ad::sub(block_forward(p, k, t, z, nullptr), z);
  }

  ad::Var block_forward(const Bindings& p, std::size_t k, double t, ad::Var z,
                        std::optional<ad::Var>* log_det) const {
    const Block& b = blocks_.at(k);
    ad::Graph& g = z.graph();
    const bool single = z.value().rank() == 1;
    const double tn = t / opts_.time_scale;
    auto time_col = [&] { return single ? g.constant(Tensor::vector({tn})) : constant_column(g, z.value().rows(), tn); };
    switch (opts_.kind) {
      case FlowKind::mlp:
        return b.nets[0](p, ad::concat({time_col(), z}));
      case FlowKind::resnet: {
        ad::Var gz = b.nets[0](p, ad::concat({time_col(), z}));
        return ad::add(z, ad::mul_row(gz, b.embeddings[0](p, t)));
      }
      case FlowKind::gru: {
        ad::Var tz = ad::concat({time_col(), z});
        ad::Var g1 = ad::scale(ad::sigmoid(b.nets[0](p, tz)), opts_.gru_alpha);
        ad::Var g3 = ad::scale(ad::sigmoid(b.nets[2](p, tz)), opts_.gru_beta);
        ad::Var g2 = ad::tanh(b.nets[1](p, ad::concat({time_col(), ad::mul(g3, z)})));
        ad::Var gate = ad::shift(ad::scale(g1, -1.0), 1.0);
        return ad::add(z, ad::mul_row(ad::mul(gate, ad::sub(g2, z)), b.embeddings[0](p, t)));
      }
      case FlowKind::coupling: {
        ad::Var cond = ad::gather_cols(z, b.conditioner);
        ad::Var in = b.conditioner.empty() ? time_col() : ad::concat({time_col(), cond});
        ad::Var log_scale = ad::mul_row(b.nets[0](p, in), b.embeddings[0](p, t));
        ad::Var shift_term = ad::mul_row(b.nets[1](p, in), b.embeddings[1](p, t));
        ad::Var moved = ad::add(ad::mul(ad::gather_cols(z, b.transformed), ad::exp(log_scale)), shift_term);
        if (log_det) {
          // Row sums of the log-scales.
          const std::size_t n1 = b.transformed.size();
          ad::Var ones = g.constant(Tensor(Shape{1, n1}, 1.0));
          ad::Var zero = g.constant(Tensor(Shape{1}, 0.0));
          ad::Var rows = ad::affine(log_scale, ones, zero);
          *log_det = single ? rows : ad::slice(rows, 0, 1);
        }
        return ad::merge_cols(moved, b.transformed, cond, b.conditioner);
      }
    }
    throw Error("flow: unknown kind");
  }

  std::string kind_name() const {
    switch (opts_.kind) {
      case FlowKind::resnet: return "resnet";
      case FlowKind::gru: return "gru";
      case FlowKind::coupling: return "coupling";
      case FlowKind::mlp: return "mlp";
    }
    return "unknown";
  }

 private:
  std::string prefix_;
  FlowOptions opts_;
  std::vector<Block> blocks_;
  std::map<std::string, PowerIterationState> power_state_;
};

struct FlowResult {
  std::vector<double> value;
  DensityLedger ledger;
};

/// Untaped single-sample evaluation of G(t, z).
inline FlowResult flow_forward(const FlowModule& flow, const ParameterStore& params, double t,
                               std::span<const double> z) {
  if (t < 0.0) throw Error("flow_forward: t must be non-negative");
  ad::Graph g;
  const Bindings p = params.bind_constants(g);
  auto out = flow.forward(p, t, g.constant(Tensor::vector({z.begin(), z.end()})));
  FlowResult r{out.value.value().data(), {}};
  if (out.log_det) {
    r.ledger.analytic = true;
    r.ledger.log_det = out.log_det->value().data();
  }
  return r;
}

/**
 * G^{-1}(t, y). Coupling blocks invert analytically in reverse order;
 * resnet/gru blocks use the Banach iteration x <- y - r(t, x), which
 * converges because each residual map is a contraction.
 */
/**
 * Inverts the flow block by block: coupling blocks in closed form, residual
 * blocks by the Banach iteration x <- y - r(x) until the update falls below
 * `tol`. The GRU contraction factor approaches one as φ(t) saturates, hence
 * the generous iteration budget.
 */
inline std::vector<double> flow_inverse(const FlowModule& flow, const ParameterStore& params, double t,
                                        std::span<const double> y, double tol = 1e-10, int max_iters = 5000) {
  if (!flow.invertible()) throw UnsupportedError("flow_inverse: the mlp decoder has no inverse");
  if (y.size() != flow.dim()) throw Error("flow_inverse: wrong state width");
  std::vector<double> x(y.begin(), y.end());
  for (std::size_t k = flow.blocks().size(); k-- > 0;) {
    const auto& b = flow.blocks()[k];
    if (flow.kind() == FlowKind::coupling) {
      ad::Graph g;
      const Bindings p = params.bind_constants(g);
      std::vector<double> cond, in{t / flow.options().time_scale};
      for (std::size_t i : b.conditioner) cond.push_back(x[i]);
      in.insert(in.end(), cond.begin(), cond.end());
      ad::Var inv = g.constant(Tensor::vector(in));
      const Tensor log_scale = ad::mul_row(b.nets[0](p, inv), b.embeddings[0](p, t)).value();
      const Tensor shift_term = ad::mul_row(b.nets[1](p, inv), b.embeddings[1](p, t)).value();
      for (std::size_t j = 0; j < b.transformed.size(); ++j) {
        const std::size_t i = b.transformed[j];
        x[i] = (x[i] - shift_term[j]) * std::exp(-log_scale[j]);
      }
      continue;
    }
    const std::vector<double> target = x;
    std::vector<double> cur = target;
    bool converged = false;
    double step = 0.0;
    for (int it = 0; it < max_iters; ++it) {
      ad::Graph gi;
      const Bindings pi = params.bind_constants(gi);
      const Tensor r = flow.residual(pi, k, t, gi.constant(Tensor::vector(cur))).value();
      step = 0.0;
      for (std::size_t i = 0; i < cur.size(); ++i) {
        const double next = target[i] - r[i];
        step = std::max(step, std::abs(next - cur[i]));
        cur[i] = next;
      }
      if (!std::isfinite(step)) break;
      if (step < tol) {
        converged = true;
        break;
      }
    }
    if (!converged) {
      throw Error("flow_inverse: fixed point did not converge in block " + std::to_string(k) + " after " +
                  std::to_string(max_iters) + " iterations (last step " + std::to_string(step) + ")");
    }
    x = cur;
  }
  return x;
}

/// Mean and standard error of vᵀ A v over Rademacher probes v.
inline DensityLedger::TraceEstimate hutchinson_trace(
    const std::function<std::vector<double>(std::span<const double>)>& mvp, std::size_t dim, std::size_t n_probes,
    Rng& rng) {
  if (n_probes < 2) throw Error("hutchinson_trace: need at least two probes");
  std::bernoulli_distribution coin(0.5);
  std::vector<double> v(dim);
  double mean = 0.0, m2 = 0.0;
  for (std::size_t k = 0; k < n_probes; ++k) {
    for (double& e : v) e = coin(rng) ? 1.0 : -1.0;
    const std::vector<double> av = mvp(v);
    if (av.size() != dim) throw Error("hutchinson_trace: product has wrong length");
    double q = 0.0;
    for (std::size_t i = 0; i < dim; ++i) q += v[i] * av[i];
    // Welford update
    const double delta = q - mean;
    mean += delta / double(k + 1);
    m2 += delta * (q - mean);
  }
  const double var = m2 / double(n_probes - 1);
  return {mean, std::sqrt(var / double(n_probes))};
}

/// log|det| via LU with partial pivoting.
inline double log_abs_det(std::vector<double> a, std::size_t n) {
  double logdet = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r * n + c]) > std::abs(a[piv * n + c])) piv = r;
    if (a[piv * n + c] == 0.0) throw Error("log_abs_det: singular matrix");
    if (piv != c)
      for (std::size_t k = 0; k < n; ++k) std::swap(a[c * n + k], a[piv * n + k]);
    logdet += std::log(std::abs(a[c * n + c]));
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r * n + c] / a[c * n + c];
      for (std::size_t k = c; k < n; ++k) a[r * n + k] -= f * a[c * n + k];
    }
  }
  if (logdet < std::log(1e-300)) throw Error("log_abs_det: singular matrix");
  return logdet;
}

/// Jacobian of z -> G(t, z) by central differences, row-major [out, in].
inline std::vector<double> flow_jacobian(const FlowModule& flow, const ParameterStore& params, double t,
                                         std::span<const double> z, double eps = 1e-6) {
  const std::size_t d = z.size();
  std::vector<double> jac(d * d), probe(z.begin(), z.end());
  for (std::size_t j = 0; j < d; ++j) {
    probe[j] = z[j] + eps;
    const auto up = flow_forward(flow, params, t, probe).value;
    probe[j] = z[j] - eps;
    const auto down = flow_forward(flow, params, t, probe).value;
    probe[j] = z[j];
    for (std::size_t i = 0; i < d; ++i) jac[i * d + j] = (up[i] - down[i]) / (2.0 * eps);
  }
  return jac;
}

/// log|det J_G(t, z)| from the full finite-difference Jacobian (d <= 8).
inline double exact_logdet(const FlowModule& flow, const ParameterStore& params, double t,
                           std::span<const double> z) {
  if (z.size() > 8) throw Error("exact_logdet: limited to dimension <= 8");
  return log_abs_det(flow_jacobian(flow, params, t, z), z.size());
}

}  // namespace dualdyn
