#pragma once

#include <abq/autograd.hpp>

#include <unordered_map>

namespace abq {

/// Plain SGD with optional heavy-ball momentum:
///   v <- momentum * v + g;  w <- w - lr_eff * v
/// The caller supplies lr_eff on every step.
class SgdOptimizer {
 public:
  explicit SgdOptimizer(float learning_rate, float momentum = 0.0f) : learning_rate_(learning_rate), momentum_(momentum) {
    if (!(learning_rate > 0.0f)) throw ConfigError("learning_rate must be positive");
    if (momentum < 0.0f || momentum >= 1.0f) throw ConfigError("momentum must lie in [0, 1)");
  }

  float learning_rate() const noexcept { return learning_rate_; }
  float momentum() const noexcept { return momentum_; }

  /// Applies one update to `param` using its accumulated gradient. No-op
  /// when the parameter has no gradient.
  void step(Var& param, float lr_eff) {
    const Tensor* g = param.grad();
    if (!g) return;
    Tensor& w = param.mutable_value();
    if (momentum_ == 0.0f) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_eff * (*g)[i];
    } else {
      auto [it, inserted] = velocity_.try_emplace(param.id(), w.shape());
      Tensor& v = it->second;
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum_ * v[i] + (*g)[i];
        w[i] -= lr_eff * v[i];
      }
    }
    check_finite(w, "sgd step");
  }

  /// Momentum buffer for `param`, if one exists.
  const Tensor* velocity(const Var& param) const {
    auto it = velocity_.find(param.id());
    return it == velocity_.end() ? nullptr : &it->second;
  }

  void set_velocity(const Var& param, Tensor v) {
    require_same_shape(param.shape(), v.shape(), "set_velocity");
    velocity_.insert_or_assign(param.id(), std::move(v));
  }

 private:
  float learning_rate_;
  float momentum_;
  std::unordered_map<const detail::Node*, Tensor> velocity_;
};

}  // namespace abq
