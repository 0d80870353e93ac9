#pragma once

// Tape-free reverse-mode autodiff: every op result keeps shared pointers to its
// inputs, and backward() walks that DAG in reverse topological order.

#include <abq/kernels.hpp>
#include <abq/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <unordered_set>
#include <vector>

namespace abq {

class Var;

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
// Receives the gradient of the node's output and the node's inputs; adds
// contributions to the inputs that require grad.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<const NodePtr> inputs)>;

struct Node {
  Tensor value;
  std::optional<Tensor> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<NodePtr> inputs;
  BackwardFn backward;
};

inline void accumulate(Node& n, const Tensor& g) {
  if (!n.requires_grad) return;
  require_same_shape(n.value.shape(), g.shape(), "gradient accumulation");
  if (!n.grad) {
    n.grad = g;
    return;
  }
  auto acc = n.grad->data();
  const auto add = g.data();
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += add[i];
}

}  // namespace detail

/// Handle to a value in the compute graph. Copies share the node.
class Var {
 public:
  Var() = default;

  /// Leaf whose gradient is tracked.
  static Var parameter(Tensor value) { return leaf(std::move(value), true); }
  /// Leaf without gradient tracking.
  static Var constant(Tensor value) { return leaf(std::move(value), false); }

  bool valid() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node().value; }
  const Shape& shape() const { return node().value.shape(); }
  bool requires_grad() const { return node().requires_grad; }

  /// Leaves only: in-place access for optimizer updates.
  Tensor& mutable_value() {
    if (!node().inputs.empty() || node().backward) throw StateError("mutable_value() on a non-leaf node");
    return node_->value;
  }

  const Tensor* grad() const { return node().grad ? &*node_->grad : nullptr; }
  void zero_grad() { node().grad.reset(); }

  const detail::Node* id() const noexcept { return node_.get(); }

  /// Builds an op result. The backward closure is dropped when no input needs grad.
  static Var make(Tensor value, std::vector<Var> inputs, detail::BackwardFn backward, std::string_view op_name) {
    check_finite(value, op_name);
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    for (auto& in : inputs) {
      n->requires_grad = n->requires_grad || in.requires_grad();
      n->inputs.push_back(in.node_);
    }
    if (n->requires_grad) {
      n->backward = std::move(backward);
    } else {
      n->inputs.clear();
    }
    return Var(std::move(n));
  }

  friend void backward(const Var& loss);

 private:
  explicit Var(detail::NodePtr n) : node_(std::move(n)) {}

  static Var leaf(Tensor value, bool requires_grad) {
    check_finite(value, "leaf");
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  detail::Node& node() const {
    if (!node_) throw StateError("use of an empty Var");
    return *node_;
  }

  detail::NodePtr node_;
};

/// Populates grad of every tracked leaf reachable from `loss` with d(loss)/d(leaf).
/// Leaf gradients add up across calls until zero_grad().
inline void backward(const Var& loss) {
  detail::Node& root = loss.node();
  if (root.value.size() != 1) throw DimensionError("backward() needs a scalar loss, got " + shape_str(root.value.shape()));
  if (root.consumed) throw StateError("backward() called twice on the same graph");
  root.consumed = true;
  if (!root.requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are scratch; leaves keep theirs.
  for (auto* n : order) {
    if (n->backward) n->grad.reset();
  }
  root.grad = Tensor(root.value.shape(), 1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->backward || !n->grad) continue;
    n->backward(*n->grad, n->inputs);
  }
}

// ---------------------------------------------------------------------------
// Ops

inline Var matmul(const Var& a, const Var& b) {
  Tensor out = kernels::gemm_accumulate<float>(a.value(), b.value());
  return Var::make(std::move(out), {a, b},
                   [](const Tensor& g, std::span<const detail::NodePtr> in) {
                     const Tensor& av = in[0]->value;
                     const Tensor& bv = in[1]->value;
                     if (in[0]->requires_grad)
                       detail::accumulate(*in[0], kernels::gemm_accumulate<float>(g, kernels::transpose2d(bv)));
                     if (in[1]->requires_grad)
                       detail::accumulate(*in[1], kernels::gemm_accumulate<float>(kernels::transpose2d(av), g));
                   },
                   "matmul");
}

/// x[N x I] times w[O x I] transposed, plus bias[O] when given.
inline Var linear(const Var& x, const Var& w, const Var& bias) {
  Tensor out = kernels::linear_accumulate<float>(x.value(), w.value());
  std::vector<Var> inputs{x, w};
  if (bias.valid()) {
    kernels::add_channel_bias(out, bias.value());
    inputs.push_back(bias);
  }
  return Var::make(std::move(out), std::move(inputs),
                   [](const Tensor& g, std::span<const detail::NodePtr> in) {
                     const Tensor& xv = in[0]->value;
                     const Tensor& wv = in[1]->value;
                     const std::size_t n = xv.dim(0), ni = xv.dim(1), no = wv.dim(0);
                     if (in[0]->requires_grad) {
                       Tensor gx(xv.shape());
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t o = 0; o < no; ++o) {
                           const float gv = g[r * no + o];
                           for (std::size_t i = 0; i < ni; ++i) gx[r * ni + i] += gv * wv[o * ni + i];
                         }
                       detail::accumulate(*in[0], gx);
                     }
                     if (in[1]->requires_grad) {
                       Tensor gw(wv.shape());
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t o = 0; o < no; ++o) {
                           const float gv = g[r * no + o];
                           for (std::size_t i = 0; i < ni; ++i) gw[o * ni + i] += gv * xv[r * ni + i];
                         }
                       detail::accumulate(*in[1], gw);
                     }
                     if (in.size() > 2 && in[2]->requires_grad) detail::accumulate(*in[2], kernels::channel_bias_grad(g, no));
                   },
                   "linear");
}

inline Var conv2d(const Var& x, const Var& kernel, const Var& bias, std::size_t stride, std::size_t padding) {
  Tensor out = kernels::conv2d_accumulate<float>(x.value(), kernel.value(), stride, padding);
  std::vector<Var> inputs{x, kernel};
  if (bias.valid()) {
    kernels::add_channel_bias(out, bias.value());
    inputs.push_back(bias);
  }
  return Var::make(std::move(out), std::move(inputs),
                   [stride, padding](const Tensor& g, std::span<const detail::NodePtr> in) {
                     const Tensor& xv = in[0]->value;
                     const Tensor& kv = in[1]->value;
                     if (in[0]->requires_grad)
                       detail::accumulate(*in[0], kernels::conv2d_backward_input(g, kv, xv.shape(), stride, padding));
                     if (in[1]->requires_grad)
                       detail::accumulate(*in[1], kernels::conv2d_backward_kernel(g, xv, kv.shape(), stride, padding));
                     if (in.size() > 2 && in[2]->requires_grad)
                       detail::accumulate(*in[2], kernels::channel_bias_grad(g, kv.dim(0)));
                   },
                   "conv2d");
}

inline Var conv2d(const Var& x, const Var& kernel, std::size_t stride = 1, std::size_t padding = 0) {
  return conv2d(x, kernel, Var{}, stride, padding);
}

/// Elementwise op with a pointwise derivative evaluated on the input value.
template <typename F, typename DF>
Var pointwise(const Var& x, F f, DF df, std::string_view name) {
  Tensor out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return Var::make(std::move(out), {x},
                   [df](const Tensor& g, std::span<const detail::NodePtr> in) {
                     const Tensor& v = in[0]->value;
                     Tensor gx(v.shape());
                     for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = g[i] * df(v[i]);
                     detail::accumulate(*in[0], gx);
                   },
                   name);
}

inline Var relu(const Var& x) {
  return pointwise(x, [](float v) { return v > 0.0f ? v : 0.0f; }, [](float v) { return v > 0.0f ? 1.0f : 0.0f; },
                   "relu");
}

inline Var hardtanh(const Var& x) {
  return pointwise(
      x, [](float v) { return std::clamp(v, -1.0f, 1.0f); },
      [](float v) { return (v >= -1.0f && v <= 1.0f) ? 1.0f : 0.0f; }, "hardtanh");
}

/// +1 for x >= 0, -1 otherwise.
inline float sign_value(float v) noexcept { return v >= 0.0f ? 1.0f : -1.0f; }

inline Tensor sign(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sign_value(x[i]);
  return out;
}

/// The true derivative of sign is zero almost everywhere; the result is a constant.
inline Var sign(const Var& x) { return Var::constant(sign(x.value())); }

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return Var::make(std::move(out), {a, b},
                   [](const Tensor& g, std::span<const detail::NodePtr> in) {
                     detail::accumulate(*in[0], g);
                     detail::accumulate(*in[1], g);
                   },
                   "add");
}

inline Var mul(const Var& a, const Var& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return Var::make(std::move(out), {a, b},
                   [](const Tensor& g, std::span<const detail::NodePtr> in) {
                     const Tensor& av = in[0]->value;
                     const Tensor& bv = in[1]->value;
                     if (in[0]->requires_grad) {
                       Tensor ga(av.shape());
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * bv[i];
                       detail::accumulate(*in[0], ga);
                     }
                     if (in[1]->requires_grad) {
                       Tensor gb(bv.shape());
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = g[i] * av[i];
                       detail::accumulate(*in[1], gb);
                     }
                   },
                   "mul");
}

inline Var add_scalar(const Var& x, float c) {
  return pointwise(x, [c](float v) { return v + c; }, [](float) { return 1.0f; }, "add_scalar");
}

inline Var scale(const Var& x, float c) {
  return pointwise(x, [c](float v) { return v * c; }, [c](float) { return c; }, "scale");
}

inline Var square(const Var& x) {
  return pointwise(x, [](float v) { return v * v; }, [](float v) { return 2.0f * v; }, "square");
}

inline Var sum(const Var& x) {
  float acc = 0.0f;
  for (float v : x.value().data()) acc += v;
  return Var::make(Tensor::scalar(acc), {x},
                   [](const Tensor& g, std::span<const detail::NodePtr> in) {
                     detail::accumulate(*in[0], Tensor(in[0]->value.shape(), g[0]));
                   },
                   "sum");
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0f / static_cast<float>(x.value().size())); }

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return Var::make(std::move(out), {x},
                   [](const Tensor& g, std::span<const detail::NodePtr> in) {
                     detail::accumulate(*in[0], g.reshaped(in[0]->value.shape()));
                   },
                   "reshape");
}

/// k x k max pooling; the gradient goes to the selected element of each window.
inline Var max_pool2d(const Var& x, std::size_t k) {
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  Tensor out = kernels::max_pool2d(x.value(), k, argmax.get());
  return Var::make(std::move(out), {x},
                   [argmax](const Tensor& g, std::span<const detail::NodePtr> in) {
                     Tensor gx(in[0]->value.shape());
                     for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
                     detail::accumulate(*in[0], gx);
                   },
                   "max_pool2d");
}

/// N x (everything else).
inline Var flatten(const Var& x) {
  const std::size_t n = x.shape()[0];
  return reshape(x, Shape{n, x.value().size() / n});
}

/// Mean softmax cross-entropy over the batch. logits: N x K.
inline Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || labels.size() != z.dim(0)) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(z.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = z.dim(0), k = z.dim(1);
  Tensor probs(z.shape());
  float total = 0.0f;
  for (std::size_t r = 0; r < n; ++r) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw DimensionError("label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
    }
    float mx = z[r * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z[r * k + j]);
    float denom = 0.0f;
    for (std::size_t j = 0; j < k; ++j) {
      probs[r * k + j] = std::exp(z[r * k + j] - mx);
      denom += probs[r * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= denom;
    total += (mx + std::log(denom)) - z[r * k + static_cast<std::size_t>(label)];
  }
  std::vector<int> kept(labels.begin(), labels.end());
  return Var::make(Tensor::scalar(total / static_cast<float>(n)), {logits},
                   [probs = std::move(probs), kept = std::move(kept)](const Tensor& g,
                                                                      std::span<const detail::NodePtr> in) {
                     const std::size_t n = probs.dim(0), k = probs.dim(1);
                     const float s = g[0] / static_cast<float>(n);
                     Tensor gz(probs.shape());
                     for (std::size_t r = 0; r < n; ++r)
                       for (std::size_t j = 0; j < k; ++j) {
                         const float onehot = (static_cast<std::size_t>(kept[r]) == j) ? 1.0f : 0.0f;
                         gz[r * k + j] = s * (probs[r * k + j] - onehot);
                       }
                     detail::accumulate(*in[0], gz);
                   },
                   "softmax_cross_entropy");
}

}  // namespace abq
