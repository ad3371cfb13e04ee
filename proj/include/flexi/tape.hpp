#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "flexi/tensor.hpp"

namespace flexi {

class Tape;
struct Node;
using Var = Node*;

/// One recorded primitive: its forward value, adjoint slot, input refs and
/// the closures that recompute / differentiate it.
struct Node {
  Tape* tape = nullptr;
  size_t index = 0;
  const char* op = "leaf";
  Tensor value;
  std::vector<double> grad;
  std::vector<Node*> inputs;
  std::function<void(Node&)> fwd;  // recompute value from inputs (tape replay)
  std::function<void(Node&)> bwd;  // scatter this->grad into inputs
  Tensor* param = nullptr;         // leaf bound to an external parameter

  int64_t numel() const { return value.numel(); }
  void ensure_grad() {
    if (grad.size() != value.data.size()) grad.assign(value.data.size(), 0.0);
  }
};

/// Append-only record of one forward computation. Single-threaded; freed as a
/// whole after each training step.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf bound to an external parameter tensor; backward accumulates into
  /// the tensor's grad slot when it requires grad.
  Var leaf(Tensor* p) {
    Var n = append("param", Tensor(p->shape, p->data), {});
    n->param = p;
    n->fwd = [p](Node& self) { self.value.data = p->data; };
    n->bwd = [p](Node& self) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
      }
    };
    return n;
  }

  /// Leaf that takes ownership of the parameter's storage instead of copying
  /// it; the caller is responsible for moving the storage back into the
  /// parameter before it is used again (see LeafCache's borrow mode). Spares
  /// the per-evaluation copy on inference-only paths.
  Var leaf_borrowed(Tensor* p) {
    Tensor t;
    t.shape = p->shape;
    t.data = std::move(p->data);
    Var n = append("param", std::move(t), {});
    n->param = p;
    n->fwd = [](Node&) {};  // the node owns the storage; nothing to refresh
    n->bwd = [p](Node& self) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
      }
    };
    return n;
  }

  /// Input data; never receives gradient.
  Var constant(Tensor v) {
    Var n = append("const", std::move(v), {});
    n->fwd = [](Node&) {};
    n->bwd = [](Node&) {};
    return n;
  }

  Var append(const char* op, Tensor value, std::vector<Var> inputs) {
    auto node = std::make_unique<Node>();
    node->tape = this;
    node->index = nodes_.size();
    node->op = op;
    node->value = std::move(value);
    node->inputs = std::move(inputs);
    Var raw = node.get();
    nodes_.push_back(std::move(node));
    ++ops_recorded_;
    return raw;
  }

  /// Reverse sweep from a scalar output; accumulates into every
  /// requires_grad parameter reachable from it.
  void backward(Var output) {
    if (output->numel() != 1)
      throw UsageError("backward requires a scalar output, got shape " +
                       shape_str(output->value.shape));
    seed_and_sweep(output, 0);
  }

  /// Reverse sweep seeded at one component of a non-scalar output.
  /// Clears node adjoints first so it can be called repeatedly (row-by-row
  /// Jacobians); parameter grads still accumulate across calls.
  void backward_component(Var output, int64_t component) {
    if (component < 0 || component >= output->numel())
      throw UsageError("backward_component index out of range");
    seed_and_sweep(output, component);
  }

  /// Recompute every node's forward value in recorded order.
  void replay() {
    for (auto& n : nodes_)
      if (n->fwd) n->fwd(*n);
  }

  void zero_node_grads() {
    for (auto& n : nodes_) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  }

  size_t size() const { return nodes_.size(); }
  /// Instrumentation: total primitives recorded over the tape's lifetime.
  size_t ops_recorded() const { return ops_recorded_; }

  const Node& node(size_t i) const { return *nodes_[i]; }

 private:
  void seed_and_sweep(Var output, int64_t component) {
    for (size_t i = 0; i <= output->index; ++i) {
      nodes_[i]->ensure_grad();
      std::fill(nodes_[i]->grad.begin(), nodes_[i]->grad.end(), 0.0);
    }
    output->grad[static_cast<size_t>(component)] = 1.0;
    for (size_t i = output->index + 1; i-- > 0;) {
      Node& n = *nodes_[i];
      if (n.bwd) n.bwd(n);
    }
  }

  std::vector<std::unique_ptr<Node>> nodes_;
  size_t ops_recorded_ = 0;
};

}  // namespace flexi
