#pragma once

// Turns an ExperimentConfig into concrete datasets, a network with its
// per-layer bit widths, and the training-loop settings.

#include <abq/ab_engine.hpp>
#include <abq/config.hpp>
#include <abq/dataset.hpp>
#include <abq/network.hpp>

#include <filesystem>
#include <limits>
#include <memory>
#include <optional>

namespace abq {

struct DataPair {
  Dataset train;
  Dataset test;
};

inline DataPair load_data(const ExperimentConfig& c, const std::filesystem::path& base_dir = {}) {
  DataPair d;
  const auto classes = static_cast<std::size_t>(c.num_classes);
  if (c.dataset == "synthetic") {
    const auto dims = static_cast<std::size_t>(c.synthetic_dims);
    const auto margin = static_cast<float>(c.synthetic_margin);
    const auto noise = static_cast<float>(c.synthetic_noise);
    // Train and test are drawn from one stream so they share class means.
    Dataset all = synthetic_gaussians(classes, dims, static_cast<std::size_t>(c.synthetic_train + c.synthetic_test),
                                      c.seed, margin, noise);
    std::vector<std::size_t> tr(static_cast<std::size_t>(c.synthetic_train));
    std::vector<std::size_t> te(static_cast<std::size_t>(c.synthetic_test));
    for (std::size_t i = 0; i < tr.size(); ++i) tr[i] = i;
    for (std::size_t i = 0; i < te.size(); ++i) te[i] = tr.size() + i;
    auto make = [&](const std::vector<std::size_t>& idx, Split split) {
      auto [images, labels] = all.gather(idx);
      Dataset s{std::move(images), std::move(labels), classes, split};
      s.validate();
      return s;
    };
    d.train = make(tr, Split::train);
    d.test = make(te, Split::test);
  } else if (c.dataset == "idx") {
    if (c.train_images.empty() || c.train_labels.empty() || c.test_images.empty() || c.test_labels.empty())
      throw ConfigError("idx dataset needs train_images, train_labels, test_images and test_labels");
    d.train = load_idx(resolve_path(base_dir, c.train_images), resolve_path(base_dir, c.train_labels), classes,
                       Split::train);
    d.test = load_idx(resolve_path(base_dir, c.test_images), resolve_path(base_dir, c.test_labels), classes,
                      Split::test);
  } else {
    if (c.cifar_train.empty() || c.cifar_test.empty()) throw ConfigError("cifar dataset needs cifar_train and cifar_test");
    d.train = load_cifar_bin(resolve_path(base_dir, c.cifar_train), Split::train);
    d.test = load_cifar_bin(resolve_path(base_dir, c.cifar_test), Split::test);
  }
  if (c.train_samples > 0 && static_cast<std::size_t>(c.train_samples) < d.train.size())
    d.train = d.train.head(static_cast<std::size_t>(c.train_samples));
  return d;
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "hardtanh") return Activation::hardtanh;
  throw ConfigError("unknown activation '" + s + "'");
}

inline GradientMode parse_gradient_mode(const std::string& s) {
  if (s == "ab") return GradientMode::ab;
  if (s == "ste") return GradientMode::ste;
  if (s == "fp32") return GradientMode::fp32;
  throw ConfigError("unknown gradient_mode '" + s + "'");
}

inline Granularity parse_granularity(const std::string& s) {
  if (s == "per_layer") return Granularity::per_layer;
  if (s == "per_channel") return Granularity::per_channel;
  throw ConfigError("unknown granularity '" + s + "'");
}

inline AlphaSchedule make_schedule(const ExperimentConfig& c) {
  return c.schedule == "exponential" ? AlphaSchedule::exponential(c.lambda) : AlphaSchedule::cubic(c.t0, c.t1);
}

inline AboConfig make_abo_config(const ExperimentConfig& c) {
  validate(c);
  AboConfig a;
  a.learning_rate = static_cast<float>(c.learning_rate);
  a.momentum = static_cast<float>(c.momentum);
  a.optimization_frequency = c.optimization_frequency;
  a.quantizing_frequency = c.quantizing_frequency;
  a.schedule = make_schedule(c);
  a.total_steps = c.steps;
  a.mode = parse_gradient_mode(c.gradient_mode);
  a.blend_activations = c.blend_activations;
  a.ste_clip = c.ste_clip;
  a.batch_size = static_cast<std::size_t>(c.batch_size);
  a.metrics_every = c.metrics_every;
  a.eval_samples = static_cast<std::size_t>(c.eval_samples);
  a.seed = c.seed;
  a.prefetch = c.prefetch;
  a.validate();
  return a;
}

/// Bit widths, granularity and observers for every layer of `net`.
inline void configure_quantization(Network& net, const ExperimentConfig& c) {
  const std::size_t n = net.layers().size();
  for (std::size_t i = 0; i < n; ++i) {
    QuantLayerState& l = net.layers()[i];
    std::int64_t wb = c.weight_bits;
    if (i == 0 && c.first_layer_weight_bits != -1) wb = c.first_layer_weight_bits;
    if (i + 1 == n && c.last_layer_weight_bits != -1) wb = c.last_layer_weight_bits;
    l.quantize_weights = wb != kPassthroughBits;
    l.spec_w = QuantSpec{l.quantize_weights ? static_cast<int>(wb) : 8, parse_granularity(c.granularity),
                         QuantMode::weights, c.scaled_binary};
    l.quantizer = std::make_shared<PpqQuantizer>(l.spec_w);
    l.w_q.reset();
    l.w_q_values = Tensor{};
    const std::int64_t ab = i == 0 ? c.first_layer_act_bits : c.act_bits;
    l.quantize_activations = ab != 0;
    l.spec_a = QuantSpec{l.quantize_activations ? static_cast<int>(ab) : 8, Granularity::per_layer,
                         QuantMode::activations, c.scaled_binary};
    l.act_observer = EmaScaleObserver(static_cast<float>(c.ema_beta));
  }
}

inline Network build_network(const ExperimentConfig& c, const Shape& input_shape) {
  validate(c);
  if (c.model == "toy") {
    Network net = make_toy_network(static_cast<float>(c.toy_init),
                                   c.weight_bits == kPassthroughBits ? 8 : static_cast<int>(c.weight_bits));
    return net;
  }
  Network net = Network::build(input_shape, parse_arch(c.arch), parse_activation(c.activation), c.seed);
  if (net.output_size() != static_cast<std::size_t>(c.num_classes))
    throw ConfigError("last layer width " + std::to_string(net.output_size()) + " does not match num_classes " +
                      std::to_string(c.num_classes));
  configure_quantization(net, c);
  return net;
}

inline std::optional<ToyObjective> toy_objective(const ExperimentConfig& c) {
  if (c.model != "toy") return std::nullopt;
  return ToyObjective{static_cast<float>(c.toy_target)};
}

}  // namespace abq
