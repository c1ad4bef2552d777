// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "corm/tensor.hpp"

#include <compare>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace corm {

/// Operation kinds understood by the graph. Every kind's backward rule is
/// expressed with kinds from this same list, so gradients can be
/// differentiated again.
enum class OpKind : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,                  // elementwise
  Scale,                // tensor times a constant (attrs.scalar)
  ScaleBy,              // tensor times a single-element node
  Matmul,
  Transpose,
  Conv2d,               // NCHW input, OIHW kernel, stride 1, same zero padding
  Conv2dInputGrad,      // adjoint of Conv2d in its input
  Conv2dKernelGrad,     // adjoint of Conv2d in its kernel (attrs.dims = kernel dims)
  Relu,
  ReluGate,             // (g, x) -> g * 1[x > 0]; constant in x
  Softplus,
  Sigmoid,
  GlobalAvgPool,        // NCHW -> NC
  SpatialBroadcast,     // NC -> NCHW (attrs.dims), each value divided by H*W
  Dense,                // x (N x F), w (C x F), b (C) -> x w^T + b
  BiasAdd,              // adds a vector along axis 1
  Axis1Sum,             // sums every axis except axis 1
  Axis1Broadcast,       // vector -> attrs.dims along axis 1
  Sum,
  Fill,                 // single element -> attrs.dims
  SquaredNorm,
  Softmax,              // along the last axis of a rank 1 or 2 tensor
  RowSumBroadcast,      // each element replaced by its row sum
  SoftmaxCrossEntropy,  // summed over rows, labels in attrs.labels
  Reshape,
};

std::string_view op_name(OpKind kind);
/// Looks up a kind by its op_name(); throws Error for unknown names.
OpKind op_kind_from_name(std::string_view name);

struct NodeId {
  std::uint32_t index = 0;
  auto operator<=>(const NodeId&) const = default;
};

struct OpAttrs {
  double scalar = 0.0;
  Dims dims;
  std::vector<std::size_t> labels;
};

/// Append-only computation graph. Values are computed eagerly when a node is
/// appended; nodes only reference earlier nodes, so the graph is acyclic.
class Graph {
 public:
  NodeId leaf(Tensor values);
  NodeId apply(OpKind kind, std::span<const NodeId> inputs, OpAttrs attrs = {});
  NodeId apply(OpKind kind, std::initializer_list<NodeId> inputs, OpAttrs attrs = {}) {
    return apply(kind, std::span<const NodeId>(inputs.begin(), inputs.size()), std::move(attrs));
  }

  const Tensor& value(NodeId id) const { return node(id).value; }
  OpKind kind(NodeId id) const { return node(id).kind; }
  std::span<const NodeId> inputs(NodeId id) const { return node(id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of a single-element `output` with respect to each of `wrt`.
  /// The results are nodes of this graph, so they can feed further ops and
  /// be differentiated again. Nodes `output` does not depend on get zeros.
  std::vector<NodeId> grad(NodeId output, std::span<const NodeId> wrt);
  std::vector<NodeId> grad(NodeId output, std::initializer_list<NodeId> wrt) {
    return grad(output, std::span<const NodeId>(wrt.begin(), wrt.size()));
  }

  /// Recomputes `target` from the recorded operations with some leaves
  /// replaced. The graph itself is left untouched.
  Tensor evaluate(NodeId target, std::span<const std::pair<NodeId, Tensor>> leaf_overrides = {}) const;

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    OpAttrs attrs;
    Tensor value;
  };

  const Node& node(NodeId id) const;
  void backward_rule(NodeId id, NodeId adjoint, const std::vector<char>& needs,
                     std::vector<std::optional<NodeId>>& adjoints);

  std::vector<Node> nodes_;
};

/// Compares grad(output, wrt) against central differences of `output` in
/// every element of the leaf `wrt`. Returns the largest relative error
/// |a - b| / max(|a|, |b|, 1e-8).
double finite_diff_check(Graph& graph, NodeId output, NodeId wrt, double epsilon);

/// Node handle bundled with its graph, for writing expressions.
class Var {
 public:
  Var() = default;
  Var(Graph& graph, NodeId id) : graph_(&graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  NodeId id() const { return id_; }
  /// Valid until the graph grows; copy what must outlive further ops.
  const Tensor& value() const { return graph_->value(id_); }
  Dims dims() const { return value().dims(); }

 private:
  Graph* graph_ = nullptr;
  NodeId id_;
};

inline Var leaf(Graph& graph, Tensor values) { return {graph, graph.leaf(std::move(values))}; }

/// Gradients of `output` with respect to `wrt`, as nodes of the same graph.
std::vector<Var> grad(Var output, std::span<const Var> wrt);
inline Var grad(Var output, Var wrt) { return grad(output, std::span<const Var>(&wrt, 1)).front(); }

namespace ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var scale_by(Var factor, Var a);
Var matmul(Var a, Var b);
Var transpose(Var a);
Var conv2d(Var input, Var kernel);
Var relu(Var a);
Var softplus(Var a);
Var sigmoid(Var a);
Var global_avg_pool(Var a);
Var dense(Var x, Var weight, Var bias);
Var bias_add(Var a, Var bias);
Var sum(Var a);
Var squared_norm(Var a);
Var softmax(Var a);
Var softmax_cross_entropy(Var logits, std::vector<std::size_t> labels);
Var reshape(Var a, Dims dims);

}  // namespace ops

inline Var operator+(Var a, Var b) { return ops::add(a, b); }
inline Var operator-(Var a, Var b) { return ops::sub(a, b); }
inline Var operator*(Var a, Var b) { return ops::mul(a, b); }
inline Var operator*(double s, Var a) { return ops::scale(a, s); }

}  // namespace corm
