#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "showcase/diff/tensor.hpp"

namespace showcase::diff {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// vector is already a topological order and backward is a reverse sweep.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// A graph that records no backward closures; for inference only.
  static Graph inference() {
    Graph g;
    g.recording_ = false;
    return g;
  }
  Graph(Graph&& other) noexcept = default;

  bool recording() const { return recording_; }

  Var constant(Tensor value) { return push_leaf("constant", std::move(value), false, nullptr); }
  Var variable(Tensor value) { return push_leaf("variable", std::move(value), recording_, nullptr); }

  /// Leaf bound to a named parameter; backward() accumulates into its grad.
  Var parameter(ParameterSet& params, const std::string& name) {
    Parameter& p = params.at(name);
    return push_leaf("parameter", p.value, recording_, &p);
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }
  std::string_view op_name(Var v) const { return nodes_.at(v.id).op; }
  std::size_t node_count() const { return nodes_.size(); }

  /// Smallest |x| seen at the input of a non-differentiable point (relu at 0).
  double kink_margin() const { return kink_margin_; }
  void note_kink_distance(double d) { kink_margin_ = std::min(kink_margin_, d); }

  void backward(Var loss) {
    if (loss.graph != this) throw NumericalError("backward: loss belongs to another graph");
    if (!recording_) throw NumericalError("backward on an inference graph");
    const Tensor& lv = nodes_.at(loss.id).value;
    if (lv.size() != 1) throw NumericalError("backward: loss must be a scalar");
    for (auto& n : nodes_) {
      if (n.requires_grad) n.grad = Tensor(n.value.rows(), n.value.cols());
    }
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (!n.grad.all_finite()) throw NumericalError("non-finite gradient at op " + std::string(n.op));
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) {
        auto dst = n.param->grad.values();
        auto src = nodes_[i].grad.values();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }

  // Op-implementation interface.
  Var push(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return push(op, std::move(value), std::vector<Var>(inputs), std::move(fn));
  }

  Var push(std::string_view op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    if (!value.all_finite()) throw NumericalError("non-finite value produced by op " + std::string(op));
    bool needs = false;
    for (const Var& in : inputs) {
      if (in.graph != this) throw NumericalError(std::string(op) + ": input belongs to another graph");
      needs = needs || nodes_[in.id].requires_grad;
    }
    needs = needs && recording_;
    nodes_.push_back(Node{op, std::move(value), Tensor(), needs, needs ? std::move(fn) : BackwardFn(), nullptr});
    return Var{this, nodes_.size() - 1};
  }

  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }
  Tensor& grad_mut(Var v) { return nodes_[v.id].grad; }

 private:
  struct Node {
    std::string_view op;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push_leaf(std::string_view op, Tensor value, bool requires_grad, Parameter* param) {
    if (!value.all_finite()) throw NumericalError("non-finite value in " + std::string(op) + " leaf");
    nodes_.push_back(Node{op, std::move(value), Tensor(), requires_grad, BackwardFn(), param});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool recording_ = true;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

}  // namespace showcase::diff
