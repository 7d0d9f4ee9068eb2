#include "storyseq/autodiff.hpp"

#include <cmath>
#include <string>

namespace storyseq::ad {
namespace {

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw Error(std::string(op) + ": shape mismatch " + std::to_string(a.rows) + "x" +
                std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                std::to_string(b.cols));
  }
}

void check_scalar(const Tensor& a, const char* op) {
  if (a.size() != 1) throw Error(std::string(op) + ": expected a scalar");
}

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var Graph::push(Tensor value, bool requires_grad, BackwardFn backward) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = track_grad_ && requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

bool Graph::any_grad(std::span<const Var> vs) const {
  if (!track_grad_) return false;
  for (Var v : vs) {
    if (nodes_[v.id].requires_grad) return true;
  }
  return false;
}

bool Graph::any_grad(std::initializer_list<Var> vs) const {
  return any_grad(std::span<const Var>(vs.begin(), vs.size()));
}

Var Graph::constant(Tensor value) { return push(std::move(value), false, {}); }

Var Graph::constant(std::span<const double> column) { return constant(Tensor::column(column)); }

Var Graph::constant_ref(const Tensor& value) {
  Node n;
  n.ref = &value;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::param_ref(const Tensor& value) {
  Node n;
  n.ref = &value;
  n.requires_grad = track_grad_;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

double Graph::scalar(Var v) const {
  const Tensor& t = value(v);
  check_scalar(t, "scalar");
  return t[0];
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) return Tensor(n.value().rows, n.value().cols);
  return n.grad;
}

Tensor& Graph::grad_ref(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.size() != n.value().size()) n.grad = Tensor(n.value().rows, n.value().cols);
  return n.grad;
}

Var Graph::linear(Var w, Var b, Var x) {
  const Tensor& W = value(w);
  const Tensor& B = value(b);
  const Tensor& X = value(x);
  if (X.cols != 1 || B.cols != 1 || B.rows != W.rows) {
    throw Error("linear: bias/input must be column vectors matching W rows");
  }
  Tensor out(W.rows, 1);
  matvec(W, X.span(), B.span(), out.span());
  return push(std::move(out), any_grad({w, b, x}), [w, b, x](Graph& g, const Tensor& og) {
    if (g.requires_grad(w)) outer_add(og.span(), g.value(x).span(), g.grad_ref(w));
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_ref(b);
      for (std::size_t i = 0; i < og.size(); ++i) gb[i] += og[i];
    }
    if (g.requires_grad(x)) matvec_transposed_add(g.value(w), og.span(), g.grad_ref(x).span());
  });
}

Var Graph::add(Var a, Var b) {
  check_same(value(a), value(b), "add");
  Tensor out = value(a);
  const Tensor& B = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return push(std::move(out), any_grad({a, b}), [a, b](Graph& g, const Tensor& og) {
    for (Var v : {a, b}) {
      if (!g.requires_grad(v)) continue;
      Tensor& gv = g.grad_ref(v);
      for (std::size_t i = 0; i < og.size(); ++i) gv[i] += og[i];
    }
  });
}

Var Graph::sub(Var a, Var b) {
  check_same(value(a), value(b), "sub");
  Tensor out = value(a);
  const Tensor& B = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return push(std::move(out), any_grad({a, b}), [a, b](Graph& g, const Tensor& og) {
    if (g.requires_grad(a)) {
      Tensor& ga = g.grad_ref(a);
      for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i];
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_ref(b);
      for (std::size_t i = 0; i < og.size(); ++i) gb[i] -= og[i];
    }
  });
}

Var Graph::mul(Var a, Var b) {
  check_same(value(a), value(b), "mul");
  Tensor out = value(a);
  const Tensor& B = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return push(std::move(out), any_grad({a, b}), [a, b](Graph& g, const Tensor& og) {
    if (g.requires_grad(a)) {
      Tensor& ga = g.grad_ref(a);
      const Tensor& B = g.value(b);
      for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i] * B[i];
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_ref(b);
      const Tensor& A = g.value(a);
      for (std::size_t i = 0; i < og.size(); ++i) gb[i] += og[i] * A[i];
    }
  });
}

Var Graph::scale(Var a, double s) {
  Tensor out = value(a);
  for (double& v : out.data) v *= s;
  return push(std::move(out), any_grad({a}), [a, s](Graph& g, const Tensor& og) {
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i] * s;
  });
}

Var Graph::add_scalar(Var a, double s) {
  Tensor out = value(a);
  for (double& v : out.data) v += s;
  return push(std::move(out), any_grad({a}), [a](Graph& g, const Tensor& og) {
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i];
  });
}

Var Graph::concat(std::span<const Var> parts) {
  std::size_t total = 0;
  for (Var p : parts) {
    if (value(p).cols != 1) throw Error("concat: parts must be column vectors");
    total += value(p).rows;
  }
  Tensor out(total, 1);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& v = value(p);
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += v.rows;
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return push(std::move(out), any_grad(parts), [ps](Graph& g, const Tensor& og) {
    std::size_t off = 0;
    for (Var p : ps) {
      const std::size_t n = g.value(p).rows;
      if (g.requires_grad(p)) {
        Tensor& gp = g.grad_ref(p);
        for (std::size_t i = 0; i < n; ++i) gp[i] += og[off + i];
      }
      off += n;
    }
  });
}

Var Graph::slice(Var a, std::size_t offset, std::size_t length) {
  const Tensor& A = value(a);
  if (A.cols != 1 || offset + length > A.rows) throw Error("slice: out of range");
  Tensor out(length, 1);
  std::copy_n(A.data.begin() + static_cast<std::ptrdiff_t>(offset), length, out.data.begin());
  return push(std::move(out), any_grad({a}), [a, offset](Graph& g, const Tensor& og) {
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < og.size(); ++i) ga[offset + i] += og[i];
  });
}

Var Graph::sigmoid(Var a) {
  Tensor out = value(a);
  for (double& v : out.data) v = sigmoid_value(v);
  Var self = push(std::move(out), any_grad({a}), {});
  if (requires_grad(self)) {
    nodes_[self.id].backward = [a, self](Graph& g, const Tensor& og) {
      const Tensor& y = g.value(self);
      Tensor& ga = g.grad_ref(a);
      for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i] * y[i] * (1.0 - y[i]);
    };
  }
  return self;
}

Var Graph::tanh(Var a) {
  Tensor out = value(a);
  for (double& v : out.data) v = std::tanh(v);
  Var self = push(std::move(out), any_grad({a}), {});
  if (requires_grad(self)) {
    nodes_[self.id].backward = [a, self](Graph& g, const Tensor& og) {
      const Tensor& y = g.value(self);
      Tensor& ga = g.grad_ref(a);
      for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i] * (1.0 - y[i] * y[i]);
    };
  }
  return self;
}

Var Graph::relu(Var a) {
  Tensor out = value(a);
  std::uint64_t pattern = 0;  // hash of the active set; wraps by design
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] > 0.0) {
      pattern = pattern * 31 + i + 1;
    } else if (out[i] <= 0.0) {
      out[i] = 0.0;  // NaN passes through
    }
  }
  record_decision(static_cast<std::int64_t>(pattern));
  return push(std::move(out), any_grad({a}), [a](Graph& g, const Tensor& og) {
    const Tensor& x = g.value(a);
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < og.size(); ++i) {
      if (x[i] > 0.0) ga[i] += og[i];
    }
  });
}

Var Graph::dot(Var a, Var b) {
  const double s = storyseq::dot(value(a).span(), value(b).span());
  return push(Tensor(1, 1, s), any_grad({a, b}), [a, b](Graph& g, const Tensor& og) {
    const double d = og[0];
    if (g.requires_grad(a)) {
      Tensor& ga = g.grad_ref(a);
      const Tensor& B = g.value(b);
      for (std::size_t i = 0; i < B.size(); ++i) ga[i] += d * B[i];
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_ref(b);
      const Tensor& A = g.value(a);
      for (std::size_t i = 0; i < A.size(); ++i) gb[i] += d * A[i];
    }
  });
}

Var Graph::stack(std::span<const Var> scalars) {
  Tensor out(scalars.size(), 1);
  for (std::size_t i = 0; i < scalars.size(); ++i) out[i] = scalar(scalars[i]);
  std::vector<Var> ss(scalars.begin(), scalars.end());
  return push(std::move(out), any_grad(scalars), [ss](Graph& g, const Tensor& og) {
    for (std::size_t i = 0; i < ss.size(); ++i) {
      if (g.requires_grad(ss[i])) g.grad_ref(ss[i])[0] += og[i];
    }
  });
}

Var Graph::softmax(Var a) {
  const Tensor& x = value(a);
  if (x.size() == 0) throw Error("softmax: empty input");
  double mx = x[0];
  for (double v : x.data) mx = std::max(mx, v);
  Tensor out(x.rows, x.cols);
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    z += out[i];
  }
  for (double& v : out.data) v /= z;
  Var self = push(std::move(out), any_grad({a}), {});
  if (requires_grad(self)) {
    nodes_[self.id].backward = [a, self](Graph& g, const Tensor& og) {
      const Tensor& y = g.value(self);
      double inner = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) inner += og[i] * y[i];
      Tensor& ga = g.grad_ref(a);
      for (std::size_t i = 0; i < y.size(); ++i) ga[i] += y[i] * (og[i] - inner);
    };
  }
  return self;
}

Var Graph::weighted_sum(Var weights, std::span<const Var> items) {
  const Tensor& w = value(weights);
  if (w.size() != items.size() || items.empty()) throw Error("weighted_sum: count mismatch");
  Tensor out(value(items[0]).rows, value(items[0]).cols);
  for (std::size_t k = 0; k < items.size(); ++k) {
    const Tensor& it = value(items[k]);
    check_same(out, it, "weighted_sum");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w[k] * it[i];
  }
  std::vector<Var> its(items.begin(), items.end());
  std::vector<Var> all = its;
  all.push_back(weights);
  return push(std::move(out), any_grad(all), [weights, its](Graph& g, const Tensor& og) {
    const Tensor& w = g.value(weights);
    for (std::size_t k = 0; k < its.size(); ++k) {
      if (g.requires_grad(weights)) {
        g.grad_ref(weights)[k] += storyseq::dot(og.span(), g.value(its[k]).span());
      }
      if (g.requires_grad(its[k])) {
        Tensor& gi = g.grad_ref(its[k]);
        for (std::size_t i = 0; i < og.size(); ++i) gi[i] += w[k] * og[i];
      }
    }
  });
}

Var Graph::lerp(Var gate, Var a, Var b) {
  const double t = scalar(gate);
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  check_same(A, B, "lerp");
  Tensor out(A.rows, A.cols);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t * A[i] + (1.0 - t) * B[i];
  return push(std::move(out), any_grad({gate, a, b}), [gate, a, b](Graph& g, const Tensor& og) {
    const double t = g.scalar(gate);
    const Tensor& A = g.value(a);
    const Tensor& B = g.value(b);
    if (g.requires_grad(gate)) {
      double s = 0.0;
      for (std::size_t i = 0; i < og.size(); ++i) s += og[i] * (A[i] - B[i]);
      g.grad_ref(gate)[0] += s;
    }
    if (g.requires_grad(a)) {
      Tensor& ga = g.grad_ref(a);
      for (std::size_t i = 0; i < og.size(); ++i) ga[i] += t * og[i];
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_ref(b);
      for (std::size_t i = 0; i < og.size(); ++i) gb[i] += (1.0 - t) * og[i];
    }
  });
}

Var Graph::sum(std::span<const Var> items) {
  if (items.empty()) throw Error("sum: empty input");
  Tensor out(value(items[0]).rows, value(items[0]).cols);
  for (Var it : items) {
    const Tensor& v = value(it);
    check_same(out, v, "sum");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  std::vector<Var> its(items.begin(), items.end());
  return push(std::move(out), any_grad(items), [its](Graph& g, const Tensor& og) {
    for (Var it : its) {
      if (!g.requires_grad(it)) continue;
      Tensor& gi = g.grad_ref(it);
      for (std::size_t i = 0; i < og.size(); ++i) gi[i] += og[i];
    }
  });
}

Var Graph::mean(std::span<const Var> items) {
  if (items.empty()) throw Error("mean: empty input");
  Tensor out(value(items[0]).rows, value(items[0]).cols);
  for (Var it : items) {
    const Tensor& v = value(it);
    check_same(out, v, "mean");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  const double inv = 1.0 / static_cast<double>(items.size());
  for (double& v : out.data) v *= inv;
  std::vector<Var> its(items.begin(), items.end());
  return push(std::move(out), any_grad(items), [its, inv](Graph& g, const Tensor& og) {
    for (Var it : its) {
      if (!g.requires_grad(it)) continue;
      Tensor& gi = g.grad_ref(it);
      for (std::size_t i = 0; i < og.size(); ++i) gi[i] += og[i] * inv;
    }
  });
}

Var Graph::max(std::span<const Var> scalars) {
  if (scalars.empty()) throw Error("max: empty input");
  std::size_t best = 0;
  double best_v = scalar(scalars[0]);
  for (std::size_t i = 1; i < scalars.size(); ++i) {
    const double v = scalar(scalars[i]);
    if (v > best_v) {
      best_v = v;
      best = i;
    }
  }
  record_decision(static_cast<std::int64_t>(best));
  Var winner = scalars[best];
  return push(Tensor(1, 1, best_v), any_grad(scalars), [winner](Graph& g, const Tensor& og) {
    if (g.requires_grad(winner)) g.grad_ref(winner)[0] += og[0];
  });
}

Var Graph::custom(std::span<const Var> inputs, Tensor value, BackwardFn backward) {
  return push(std::move(value), any_grad(inputs), std::move(backward));
}

void Graph::backward(Var root) {
  check_scalar(value(root), "backward");
  if (!track_grad_ || !requires_grad(root)) return;
  grad_ref(root)[0] += 1.0;
  for (std::size_t id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad);
  }
}

}  // namespace storyseq::ad
