#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "dualdyn/ops.hpp"

namespace dualdyn {

using Rng = std::mt19937_64;

enum class InitScheme { xavier_uniform, zeros };

/// Xavier-uniform draws in ±sqrt(6 / (fan_in + fan_out)); shape [out, in]
/// gives fan_in = in, fan_out = out. Rank-1 shapes use n for both fans.
inline Tensor init_params(const Shape& shape, InitScheme scheme, Rng& rng) {
  Tensor t(shape, 0.0);
  if (scheme == InitScheme::zeros || t.numel() == 0) return t;
  double fan_in = 1.0, fan_out = 1.0;
  if (shape.size() == 2) {
    fan_out = double(shape[0]);
    fan_in = double(shape[1]);
  } else if (shape.size() == 1) {
    fan_in = fan_out = double(shape[0]);
  }
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

/// Live parameter leaves of one graph, looked up by name.
class Bindings {
 public:
  void insert(const std::string& name, ad::Var v) { vars_.emplace(name, v); }
  ad::Var operator()(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw Error("bindings: no parameter named '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

 private:
  std::unordered_map<std::string, ad::Var> vars_;
};

/// Named trainable tensors in a stable (lexicographic) order.
class ParameterStore {
 public:
  void add(const std::string& name, Tensor value) {
    if (tensors_.count(name)) throw Error("parameters: duplicate name '" + name + "'");
    tensors_.emplace(name, std::move(value));
  }
  void erase_prefix(const std::string& prefix) {
    for (auto it = tensors_.begin(); it != tensors_.end();) {
      it = it->first.rfind(prefix, 0) == 0 ? tensors_.erase(it) : std::next(it);
    }
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  Tensor& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("parameters: no parameter named '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("parameters: no parameter named '" + name + "'");
    return it->second;
  }
  const std::map<std::string, Tensor>& all() const { return tensors_; }
  std::map<std::string, Tensor>& all() { return tensors_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : tensors_) out.push_back(k);
    return out;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : tensors_) n += v.numel();
    return n;
  }

  Bindings bind(ad::Graph& graph) const {
    Bindings b;
    for (const auto& [name, value] : tensors_) b.insert(name, graph.parameter(name, value));
    return b;
  }

  /// Binds every tensor as a constant leaf, for evaluation without gradients.
  Bindings bind_constants(ad::Graph& graph) const {
    Bindings b;
    for (const auto& [name, value] : tensors_) b.insert(name, graph.constant(value));
    return b;
  }

  /// All parameters concatenated in name order.
  Tensor flatten() const {
    std::vector<double> flat;
    flat.reserve(count());
    for (const auto& [k, v] : tensors_) flat.insert(flat.end(), v.data().begin(), v.data().end());
    return Tensor::vector(std::move(flat));
  }
  void unflatten(const Tensor& flat) {
    if (flat.numel() != count()) throw Error("parameters: flat vector has wrong length");
    std::size_t off = 0;
    for (auto& [k, v] : tensors_) {
      std::copy(flat.data().begin() + long(off), flat.data().begin() + long(off + v.numel()), v.data().begin());
      off += v.numel();
    }
  }
  static Tensor flatten(const ad::GradientSet& grads) {
    std::vector<double> flat;
    for (const auto& [k, v] : grads) flat.insert(flat.end(), v.data().begin(), v.data().end());
    return Tensor::vector(std::move(flat));
  }

 private:
  std::map<std::string, Tensor> tensors_;
};

/**
 * Stack of affine layers with tanh between them.
 *
 * sizes = {in, hidden..., out}. A two-entry stack is a single affine map.
 * Parameters are "<name>.w<i>" with shape [out_i, in_i] and "<name>.b<i>".
 */
struct Mlp {
  std::string name;
  std::vector<std::size_t> sizes;
  bool tanh_output = false;

  std::size_t layers() const { return sizes.size() - 1; }
  std::size_t in() const { return sizes.front(); }
  std::size_t out() const { return sizes.back(); }
  std::string weight(std::size_t i) const { return name + ".w" + std::to_string(i); }
  std::string bias(std::size_t i) const { return name + ".b" + std::to_string(i); }

  void init(ParameterStore& store, Rng& rng, bool zero_last_layer = false) const {
    for (std::size_t i = 0; i < layers(); ++i) {
      const bool last = i + 1 == layers();
      const InitScheme scheme = last && zero_last_layer ? InitScheme::zeros : InitScheme::xavier_uniform;
      store.add(weight(i), init_params({sizes[i + 1], sizes[i]}, scheme, rng));
      store.add(bias(i), Tensor(Shape{sizes[i + 1]}, 0.0));
    }
  }

  ad::Var operator()(const Bindings& p, ad::Var x) const {
    for (std::size_t i = 0; i < layers(); ++i) {
      x = ad::affine(x, p(weight(i)), p(bias(i)));
      if (i + 1 < layers() || tanh_output) x = ad::tanh(x);
    }
    return x;
  }
};

/// Column of a constant value with `rows` entries, shaped like a batch input.
inline ad::Var constant_column(ad::Graph& g, std::size_t rows, double value) {
  return g.constant(Tensor(Shape{rows, 1}, value));
}

}  // namespace dualdyn
