#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dualdyn/tensor.hpp"

namespace dualdyn::ad {

using NodeId = std::size_t;

enum class OpKind {
  constant,
  parameter,
  affine,
  matmul,
  add,
  sub,
  mul,
  mul_row,
  scale,
  shift,
  tanh,
  sigmoid,
  exp,
  log,
  relu,
  square,
  sum,
  mean,
  concat,
  slice,
  gather_cols,
  merge_cols,
  softmax,
  log_softmax,
  pick,
  row_matvec,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::constant: return "constant";
    case OpKind::parameter: return "parameter";
    case OpKind::affine: return "affine";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::mul_row: return "mul_row";
    case OpKind::scale: return "scale";
    case OpKind::shift: return "shift";
    case OpKind::tanh: return "tanh";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::relu: return "relu";
    case OpKind::square: return "square";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::gather_cols: return "gather_cols";
    case OpKind::merge_cols: return "merge_cols";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::pick: return "pick";
    case OpKind::row_matvec: return "row_matvec";
  }
  return "unknown";
}

/// Parameter name -> gradient of the loss with respect to that parameter.
using GradientSet = std::map<std::string, Tensor>;

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  NodeId id() const { return id_; }
  Graph& graph() const { return *graph_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

/**
 * Append-only tape of eagerly evaluated operations.
 *
 * Node ids are assigned in creation order, so inputs always precede their
 * consumers and the reverse pass is a single sweep from the loss down to 0.
 * Gradients accumulate into per-node buffers; parameters used by several
 * nodes (e.g. a vector field applied at every solver step) sum contributions.
 */
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) {
    return push(OpKind::constant, {}, std::move(value), false, nullptr);
  }

  /// Leaf that receives a gradient reported under `name` by backward().
  Var parameter(const std::string& name, const Tensor& value) {
    for (const auto& [existing, id] : params_) {
      if (existing == name) throw Error("graph: parameter '" + name + "' bound twice");
    }
    Var v = push(OpKind::parameter, {}, value, true, nullptr);
    params_.emplace_back(name, v.id());
    return v;
  }

  /// Appends an operation node. The backward function is dropped when no
  /// input requires a gradient.
  Var record(OpKind kind, const std::vector<Var>& inputs, Tensor value, BackwardFn fn) {
    std::vector<NodeId> ids;
    ids.reserve(inputs.size());
    bool needs_grad = false;
    for (const Var& in : inputs) {
      if (&in.graph() != this) throw Error(std::string(op_name(kind)) + ": input from another graph");
      ids.push_back(in.id());
      needs_grad = needs_grad || nodes_[in.id()].requires_grad;
    }
    return push(kind, std::move(ids), std::move(value), needs_grad, needs_grad ? std::move(fn) : nullptr);
  }

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  OpKind kind(NodeId id) const { return nodes_[id].kind; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_[id].inputs; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, zero-allocated on first access.
  Tensor& grad(NodeId id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor::zeros_like(n.value);
      n.has_grad = true;
    }
    return n.grad;
  }
  bool has_grad(NodeId id) const { return nodes_[id].has_grad; }

  /// Reverse sweep from a scalar loss. Every bound parameter appears in the
  /// result; parameters the loss does not reach get zeros.
  GradientSet backward(Var loss) {
    if (&loss.graph() != this) throw Error("backward: loss belongs to another graph");
    if (value(loss.id()).numel() != 1) {
      throw Error("backward: loss must be scalar, got shape " + shape_str(value(loss.id()).shape()));
    }
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    grad(loss.id())[0] = 1.0;
    for (NodeId id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.has_grad && n.backward) n.backward(*this, id);
    }
    GradientSet out;
    for (const auto& [name, id] : params_) {
      out.emplace(name, has_grad(id) ? nodes_[id].grad : Tensor::zeros_like(nodes_[id].value));
    }
    return out;
  }

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(OpKind kind, std::vector<NodeId> inputs, Tensor value, bool requires_grad, BackwardFn fn) {
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.value.requires_grad = requires_grad;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, NodeId>> params_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }

}  // namespace dualdyn::ad
