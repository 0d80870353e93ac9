#pragma once

// Graph primitives for the two ways of training through a quantizer:
//
//   alpha-blending   w' = (1 - alpha) w + alpha w_q
//                    dL/dw = (1 - alpha) dL/dw'   (w_q contributes nothing)
//   straight-through w' = w_q
//                    dL/dw = dL/dw'               (optionally masked to |w| <= 1)
//
// Both share the forward value of w_q; they differ only in the backward rule.

#include <abq/autograd.hpp>

namespace abq {

/// (1 - alpha) * w + alpha * w_q, elementwise.
inline Tensor blend_weights(const Tensor& w, const Tensor& w_q, float alpha) {
  require_same_shape(w.shape(), w_q.shape(), "blend_weights");
  if (!(alpha >= 0.0f && alpha <= 1.0f)) throw ConfigError("blend coefficient must lie in [0, 1]");
  Tensor out(w.shape());
  const float keep = 1.0f - alpha;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * w[i] + alpha * w_q[i];
  return out;
}

/// Gradient w.r.t. the full-precision tensor of a blended loss, given the
/// gradient w.r.t. the blended tensor.
inline Tensor ab_backward(const Tensor& upstream, float alpha) {
  Tensor g(upstream.shape());
  const float keep = 1.0f - alpha;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = keep * upstream[i];
  return g;
}

/// Straight-through gradient. With `clipped`, entries where |w| > 1 get zero.
inline Tensor ste_backward(const Tensor& upstream, const Tensor& w, bool clipped) {
  require_same_shape(upstream.shape(), w.shape(), "ste_backward");
  Tensor g = upstream;
  if (clipped) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (std::fabs(w[i]) > 1.0f) g[i] = 0.0f;
    }
  }
  return g;
}

/// Graph node for w' = blend_weights(w, w_q, alpha); w_q is a constant.
inline Var blend(const Var& w, const Tensor& w_q, float alpha) {
  return Var::make(blend_weights(w.value(), w_q, alpha), {w},
                   [alpha](const Tensor& g, std::span<const detail::NodePtr> in) {
                     detail::accumulate(*in[0], ab_backward(g, alpha));
                   },
                   "blend");
}

/// Graph node whose value is w_q and whose gradient passes straight to w.
inline Var straight_through(const Var& w, const Tensor& w_q, bool clipped) {
  require_same_shape(w.shape(), w_q.shape(), "straight_through");
  return Var::make(w_q, {w},
                   [clipped](const Tensor& g, std::span<const detail::NodePtr> in) {
                     detail::accumulate(*in[0], ste_backward(g, in[0]->value, clipped));
                   },
                   "straight_through");
}

}  // namespace abq
