#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "storyseq/tensor.hpp"

namespace storyseq::ad {

struct Var {
  std::size_t id = 0;
};

class Graph;
using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

// Tape for reverse-mode differentiation over small dense tensors.
//
// Nodes are appended in evaluation order; backward() walks them in reverse.
// Every op whose inputs carry no gradient is recorded without a closure, so
// the same code path serves inference (track_grad = false) and training.
//
// Non-smooth ops take the lowest-index branch on ties and treat the kink of
// relu as inactive (x > 0 strictly). Every such branch choice is appended to
// decisions(); two evaluations with equal decision vectors lie on the same
// smooth piece, which is what finite-difference checking relies on.
class Graph {
 public:
  explicit Graph(bool track_grad = true) : track_grad_(track_grad) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaves. `ref` leaves alias caller storage, which must outlive the graph.
  Var constant(Tensor value);
  Var constant(std::span<const double> column);
  Var constant_ref(const Tensor& value);
  Var param_ref(const Tensor& value);

  const Tensor& value(Var v) const { return nodes_[v.id].value(); }
  double scalar(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  // Zero tensor if no gradient reached v.
  Tensor grad(Var v) const;
  Tensor& grad_ref(Var v);

  Var linear(Var w, Var b, Var x);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  Var concat(std::span<const Var> parts);
  Var slice(Var a, std::size_t offset, std::size_t length);
  Var sigmoid(Var a);
  Var tanh(Var a);
  Var relu(Var a);
  Var dot(Var a, Var b);
  Var stack(std::span<const Var> scalars);
  Var softmax(Var a);
  Var weighted_sum(Var weights, std::span<const Var> items);
  // gate * a + (1 - gate) * b, gate scalar.
  Var lerp(Var gate, Var a, Var b);
  Var mean(std::span<const Var> items);
  Var sum(std::span<const Var> items);
  Var max(std::span<const Var> scalars);

  // Escape hatch for fused ops defined elsewhere (e.g. dense matching).
  Var custom(std::span<const Var> inputs, Tensor value, BackwardFn backward);

  void record_decision(std::int64_t d) { decisions_.push_back(d); }
  const std::vector<std::int64_t>& decisions() const { return decisions_; }

  // Seeds d(root) = 1; root must be a scalar.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    const Tensor* ref = nullptr;
    Tensor own;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;

    const Tensor& value() const { return ref ? *ref : own; }
  };

  Var push(Tensor value, bool requires_grad, BackwardFn backward);
  bool any_grad(std::span<const Var> vs) const;
  bool any_grad(std::initializer_list<Var> vs) const;

  bool track_grad_;
  std::deque<Node> nodes_;
  std::vector<std::int64_t> decisions_;
};

}  // namespace storyseq::ad
