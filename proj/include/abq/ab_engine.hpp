#pragma once

// Alpha-blending training loop with straight-through and full-precision
// baselines sharing the same forward code.
//
// Per step: refresh w_q (every quantizing_frequency steps), run the forward
// pass with the mode's weight/activation paths, backprop, update, log, and
// raise alpha from the schedule (every optimization_frequency steps while
// alpha < 1). Under blending the weight gradient already carries the
// (1 - alpha) factor, so the effective step on dL/dw' is lr * (1 - alpha).

#include <abq/dataset.hpp>
#include <abq/network.hpp>
#include <abq/optim.hpp>
#include <abq/schedule.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace abq {

enum class GradientMode : std::uint8_t { ab = 0, ste = 1, fp32 = 2 };

inline const char* to_string(GradientMode m) {
  switch (m) {
    case GradientMode::ab: return "ab";
    case GradientMode::ste: return "ste";
    case GradientMode::fp32: return "fp32";
  }
  return "?";
}

struct AboConfig {
  float learning_rate = 0.1f;
  float momentum = 0.0f;
  std::int64_t optimization_frequency = 1;
  std::int64_t quantizing_frequency = 1;
  AlphaSchedule schedule = AlphaSchedule::cubic(0, 1);
  std::int64_t total_steps = 1;  // the loop runs steps 0..total_steps inclusive
  GradientMode mode = GradientMode::ab;
  bool blend_activations = true;
  bool ste_clip = true;
  std::size_t batch_size = 32;
  std::int64_t metrics_every = 1;
  std::size_t eval_samples = 0;  // 0: whole eval set
  std::uint64_t seed = 0;
  bool prefetch = false;

  void validate() const {
    if (!(learning_rate > 0.0f)) throw ConfigError("learning_rate must be positive");
    if (momentum < 0.0f || momentum >= 1.0f) throw ConfigError("momentum must lie in [0, 1)");
    if (optimization_frequency < 1) throw ConfigError("optimization_frequency must be >= 1");
    if (quantizing_frequency < 1) throw ConfigError("quantizing_frequency must be >= 1");
    if (metrics_every < 1) throw ConfigError("metrics_every must be >= 1");
    if (total_steps < 0) throw ConfigError("steps must be >= 0");
    if (schedule.kind == ScheduleKind::cubic && std::isfinite(schedule.t1)) {
      if (!(schedule.t0 < schedule.t1)) throw ConfigError("alpha schedule needs T0 < T1");
      if (schedule.t1 > static_cast<double>(total_steps)) throw ConfigError("T1 must not exceed the total step count");
    }
  }
};

/// One CSV row: step,alpha,loss,acc_w,acc_wq,eff_lr
struct MetricsRow {
  std::int64_t step = 0;
  double alpha = 0.0;
  double loss = 0.0;
  double acc_w = 0.0;
  double acc_wq = 0.0;
  double eff_lr = 0.0;

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

using MetricsSink = std::function<void(const MetricsRow&)>;

/// Forward options for each evaluation / training flavour.
inline ForwardOptions full_precision_forward() { return ForwardOptions{}; }

/// Quantized weights and activations: the deployed (alpha = 1) model.
inline ForwardOptions quantized_forward_options() {
  ForwardOptions o;
  o.weights = WeightPath::quantized;
  o.activations = ActivationPath::quantized;
  o.alpha = 1.0f;
  return o;
}

inline ForwardOptions training_forward(const AboConfig& cfg, float alpha) {
  ForwardOptions o;
  o.observe = true;
  o.ste_clip = cfg.ste_clip;
  o.alpha = alpha;
  switch (cfg.mode) {
    case GradientMode::ab:
      o.weights = WeightPath::blended;
      if (cfg.blend_activations) {
        o.activations = ActivationPath::blended;
      } else {
        o.activations = alpha >= 1.0f ? ActivationPath::quantized : ActivationPath::full;
      }
      break;
    case GradientMode::ste:
      o.weights = WeightPath::straight_through;
      o.activations = ActivationPath::straight_through;
      break;
    case GradientMode::fp32:
      break;
  }
  return o;
}

/// Top-1 accuracy over the first `max_samples` samples (all when 0).
inline double evaluate_accuracy(Network& net, const Dataset& data, const ForwardOptions& opt,
                                std::size_t max_samples = 0, std::size_t batch = 256) {
  ForwardOptions eval = opt;
  eval.observe = false;
  const std::size_t n = (max_samples == 0 || max_samples > data.size()) ? data.size() : max_samples;
  if (n == 0) return 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t end = std::min(n, start + batch);
    idx.resize(end - start);
    for (std::size_t i = start; i < end; ++i) idx[i - start] = i;
    auto [imgs, ls] = data.gather(idx);
    const Tensor logits = net.forward(imgs, eval).value();
    const std::size_t k = logits.dim(1);
    for (std::size_t r = 0; r < ls.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (logits[r * k + j] > logits[r * k + best]) best = j;
      if (static_cast<int>(best) == ls[r]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

/// Accuracy of the deployed model (quantized weights and activations).
inline double quantized_eval(Network& net, const Dataset& data, std::size_t max_samples = 0) {
  return evaluate_accuracy(net, data, quantized_forward_options(), max_samples);
}

/// Scalar objective (w' - target)^2 used for the one-weight demonstration.
struct ToyObjective {
  float target = 5.7f;
};

/// Stateful training loop. Either `train` (classification) or `toy` is used.
class AboTrainer {
 public:
  AboTrainer(Network& net, AboConfig cfg, const Dataset* train, const Dataset* eval,
             std::optional<ToyObjective> toy = std::nullopt)
      : net_(net), cfg_(std::move(cfg)), train_(train), eval_(eval), toy_(toy),
        optimizer_(cfg_.learning_rate, cfg_.momentum) {
    cfg_.validate();
    if (!toy_ && !train_) throw ConfigError("classification training needs a dataset");
    if (train_) {
      if (train_->sample_shape() != net_.input_shape()) {
        throw ConfigError("dataset sample shape " + shape_str(train_->sample_shape()) + " does not match network input " +
                          shape_str(net_.input_shape()));
      }
      sampler_.emplace(train_->size(), cfg_.batch_size, cfg_.seed);
    }
    if (cfg_.mode != GradientMode::ab) alpha_ = cfg_.mode == GradientMode::ste ? 1.0f : 0.0f;
  }

  void set_sink(MetricsSink sink) { sink_ = std::move(sink); }

  std::int64_t step() const noexcept { return step_; }
  float alpha() const noexcept { return alpha_; }
  bool finished() const noexcept { return step_ > cfg_.total_steps; }
  const AboConfig& config() const noexcept { return cfg_; }
  SgdOptimizer& optimizer() noexcept { return optimizer_; }
  Network& network() noexcept { return net_; }
  const std::vector<MetricsRow>& history() const noexcept { return history_; }

  /// Restores loop position (checkpoint resume).
  void resume_at(std::int64_t step, float alpha) {
    step_ = step;
    alpha_ = alpha;
    // A checkpoint taken after the freeze already holds the final codes.
    bool have_codes = true;
    for (const auto& l : net_.layers()) have_codes = have_codes && (!l.quantize_weights || l.w_q);
    weights_dirty_ = !(cfg_.mode == GradientMode::ab && alpha_ >= 1.0f && have_codes);
  }

  /// Runs until the step counter reaches `stop` (exclusive) or the loop ends.
  void run_until(std::int64_t stop) {
    const std::int64_t last = std::min(stop - 1, cfg_.total_steps);
    if (last < step_) return;
    std::optional<BatchPrefetcher> prefetch;
    if (cfg_.prefetch && train_ && !toy_) {
      prefetch.emplace(*train_, cfg_.batch_size, cfg_.seed, static_cast<std::uint64_t>(step_),
                       static_cast<std::uint64_t>(last));
    }
    while (step_ <= last) {
      if (prefetch) {
        Batch b = prefetch->next();
        one_step(&b);
      } else {
        one_step(nullptr);
      }
    }
    if (finished() && weights_dirty_) {
      net_.refresh_quantized();
      weights_dirty_ = false;
    }
  }

  void run() { run_until(cfg_.total_steps + 1); }

 private:
  void one_step(Batch* pre) {
    const std::int64_t s = step_;
    // Frozen weights keep their codes: re-running the projection from its own
    // warm start could still move an unconverged scale.
    if (s % cfg_.quantizing_frequency == 0 && weights_dirty_) {
      net_.refresh_quantized();
      weights_dirty_ = false;
    }

    const float alpha_used = alpha_;
    const ForwardOptions fwd = training_forward(cfg_, alpha_used);
    Var loss;
    if (toy_) {
      QuantLayerState& layer = net_.layers().front();
      Var w = layer.weight;
      switch (fwd.weights) {
        case WeightPath::blended: w = blend(layer.weight, layer.w_q_values, fwd.alpha); break;
        case WeightPath::straight_through: w = straight_through(layer.weight, layer.w_q_values, false); break;
        case WeightPath::quantized: w = Var::constant(layer.w_q_values); break;
        case WeightPath::full: break;
      }
      loss = sum(square(add_scalar(w, -toy_->target)));
    } else {
      Batch local;
      if (!pre) {
        auto idx = sampler_->indices(static_cast<std::uint64_t>(s));
        auto [imgs, ls] = train_->gather(idx);
        local = Batch{static_cast<std::uint64_t>(s), std::move(imgs), std::move(ls)};
        pre = &local;
      }
      Var logits = net_.forward(pre->images, fwd);
      loss = softmax_cross_entropy(logits, pre->labels);
    }
    const double loss_value = loss.value().item();
    if (!std::isfinite(loss_value)) {
      throw NumericError("training diverged at step " + std::to_string(s) + " (loss " + std::to_string(loss_value) + ")");
    }
    backward(loss);

    const float lr = cfg_.learning_rate;
    if (cfg_.mode == GradientMode::ab) {
      if (alpha_used < 1.0f) {
        // Weight gradients already carry (1 - alpha); biases are scaled here.
        const float bias_lr = lr * (1.0f - alpha_used);
        for (auto& layer : net_.layers()) {
          optimizer_.step(layer.weight, lr);
          optimizer_.step(layer.bias, bias_lr);
        }
        weights_dirty_ = true;
      }
    } else {
      for (auto& layer : net_.layers()) {
        optimizer_.step(layer.weight, lr);
        optimizer_.step(layer.bias, lr);
      }
      weights_dirty_ = true;
    }
    net_.zero_grad();

    MetricsRow row;
    row.step = s;
    row.alpha = alpha_used;
    row.loss = loss_value;
    row.eff_lr = cfg_.mode == GradientMode::ab ? static_cast<double>(lr * (1.0f - alpha_used)) : lr;
    if (eval_ && !toy_ && (s % cfg_.metrics_every == 0 || s == cfg_.total_steps)) {
      row.acc_w = evaluate_accuracy(net_, *eval_, full_precision_forward(), cfg_.eval_samples);
      row.acc_wq = evaluate_accuracy(net_, *eval_, quantized_forward_options(), cfg_.eval_samples);
      emit(row);
    } else if (toy_ || !eval_) {
      if (s % cfg_.metrics_every == 0 || s == cfg_.total_steps) emit(row);
    }

    if (cfg_.mode == GradientMode::ab && s % cfg_.optimization_frequency == 0 && alpha_ < 1.0f) {
      alpha_ = static_cast<float>(cfg_.schedule.at(static_cast<double>(s)));
    }
    ++step_;
  }

  void emit(const MetricsRow& row) {
    history_.push_back(row);
    if (sink_) sink_(row);
  }

  Network& net_;
  AboConfig cfg_;
  const Dataset* train_;
  const Dataset* eval_;
  std::optional<ToyObjective> toy_;
  SgdOptimizer optimizer_;
  std::optional<BatchSampler> sampler_;
  MetricsSink sink_;
  std::vector<MetricsRow> history_;
  std::int64_t step_ = 0;
  float alpha_ = 0.0f;
  bool weights_dirty_ = true;  // changed since the last refresh of w_q
};

struct AboResult {
  std::vector<QuantResult> quantized_weights;
  std::vector<MetricsRow> metrics;
  float final_alpha = 0.0f;
};

/// Runs the whole loop and returns the final codes/scales and the metrics log.
inline AboResult run_abo(Network& net, const Dataset* train, const Dataset* eval, const AboConfig& cfg,
                         std::optional<ToyObjective> toy = std::nullopt, MetricsSink sink = {}) {
  AboTrainer trainer(net, cfg, train, eval, toy);
  trainer.set_sink(std::move(sink));
  trainer.run();
  AboResult r;
  for (const auto& l : net.layers()) {
    if (l.w_q) r.quantized_weights.push_back(*l.w_q);
  }
  r.metrics = trainer.history();
  r.final_alpha = trainer.alpha();
  return r;
}

/// One-weight network for the (w - target)^2 demonstration, quantized by
/// unit-scale rounding.
inline Network make_toy_network(float initial_weight, int bits = 8) {
  QuantLayerState layer;
  layer.geom = LayerGeometry{LayerKind::dense, 1, 1, 1, 1, 0, Activation::none};
  layer.weight = Var::parameter(Tensor(Shape{1, 1}, initial_weight));
  layer.bias = Var::parameter(Tensor(Shape{1}));
  layer.spec_w.bits = bits;
  layer.quantizer = std::make_shared<RoundQuantizer>(bits);
  std::vector<QuantLayerState> layers;
  layers.push_back(std::move(layer));
  return Network::from_layers(Shape{1, 1, 1}, std::move(layers));
}

}  // namespace abq
