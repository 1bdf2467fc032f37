#pragma once

#include <cmath>
#include <concepts>
#include <map>
#include <string>

#include "dualdyn/params.hpp"

namespace dualdyn {

/// Raised when a loss or gradient stops being finite during training.
class DivergenceError : public NonFiniteError {
 public:
  using NonFiniteError::NonFiniteError;
};

enum class OptimizerKind { adam, sgd };

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8) or plain gradient descent.
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind = OptimizerKind::adam) : kind_(kind) {}

  OptimizerKind kind() const { return kind_; }
  long steps() const { return step_; }

  void apply(ParameterStore& params, const ad::GradientSet& grads, double lr) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1, double(step_));
    const double bc2 = 1.0 - std::pow(beta2, double(step_));
    for (auto& [name, value] : params.all()) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Tensor& g = git->second;
      if (kind_ == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < value.numel(); ++i) value[i] -= lr * g[i];
        continue;
      }
      auto [mit, m_new] = m_.try_emplace(name, Tensor::zeros_like(value));
      auto [vit, v_new] = v_.try_emplace(name, Tensor::zeros_like(value));
      Tensor& m = mit->second;
      Tensor& v = vit->second;
      for (std::size_t i = 0; i < value.numel(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + epsilon);
      }
    }
  }

  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double epsilon = 1e-8;

 private:
  OptimizerKind kind_;
  long step_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

struct StepMetrics {
  double loss = 0.0;
  double grad_norm = 0.0;
};

inline double gradient_norm(const ad::GradientSet& grads) {
  double acc = 0.0;
  for (const auto& [k, g] : grads)
    for (double v : g.data()) acc += v * v;
  return std::sqrt(acc);
}

/// Anything with named parameters, a scalar loss on a batch, and a hook run
/// after each parameter update.
template <class Model, class Batch>
concept TrainableModel = requires(Model& m, const Model& cm, ad::Graph& g, const Bindings& b, const Batch& batch) {
  { m.parameters() } -> std::same_as<ParameterStore&>;
  { cm.loss(g, b, batch) } -> std::same_as<ad::Var>;
  m.after_step();
};

/**
 * One joint optimisation step: a single forward pass over the whole model,
 * one reverse sweep, one update of every parameter. A zero learning rate is
 * a no-op on the parameters.
 */
template <class Model, class Batch>
  requires TrainableModel<Model, Batch>
StepMetrics train_step(Model& model, const Batch& batch, Optimizer& optimizer, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error("train_step: learning rate must be non-negative");
  ad::Graph graph;
  const Bindings bound = model.parameters().bind(graph);
  const ad::Var loss = model.loss(graph, bound, batch);
  const double loss_value = loss.value().item();
  if (!std::isfinite(loss_value)) throw DivergenceError("train_step: non-finite loss, step aborted");
  const ad::GradientSet grads = graph.backward(loss);
  const double norm = gradient_norm(grads);
  if (!std::isfinite(norm)) throw DivergenceError("train_step: non-finite gradient, step aborted");
  if (lr > 0.0) {
    optimizer.apply(model.parameters(), grads, lr);
    model.after_step();
  }
  return {loss_value, norm};
}

}  // namespace dualdyn
