#pragma once

// Feed-forward stack of dense / conv layers, each carrying the quantization
// state the blended training loop needs.

#include <abq/blend.hpp>
#include <abq/quantizer.hpp>

#include <cstdint>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace abq {

enum class LayerKind : std::uint8_t { dense = 0, conv = 1 };
enum class Activation : std::uint8_t { none = 0, relu = 1, hardtanh = 2 };

/// Bit width meaning "leave in full precision".
inline constexpr int kPassthroughBits = 32;

struct LayerGeometry {
  LayerKind kind = LayerKind::dense;
  std::size_t out = 0;
  std::size_t in = 0;  // input features (dense) or input channels (conv)
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Activation activation = Activation::none;
  std::size_t pool = 1;  // conv only: k x k max pooling after the activation

  Shape weight_shape() const {
    if (kind == LayerKind::dense) return {out, in};
    return {out, in, kernel, kernel};
  }
  std::size_t fan_in() const { return kind == LayerKind::dense ? in : in * kernel * kernel; }

  friend bool operator==(const LayerGeometry&, const LayerGeometry&) = default;
};

/// One entry of an architecture string such as "conv:8:5:1:2:2,dense:10".
/// Conv fields are out:kernel:stride:padding with an optional trailing
/// max-pool size.
struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t out = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t pool = 1;
};

inline std::vector<LayerSpec> parse_arch(const std::string& arch) {
  std::vector<LayerSpec> specs;
  std::stringstream items(arch);
  std::string item;
  while (std::getline(items, item, ',')) {
    std::vector<std::string> parts;
    std::stringstream fields(item);
    std::string f;
    while (std::getline(fields, f, ':')) parts.push_back(f);
    auto num = [&](std::size_t i) -> std::size_t {
      try {
        std::size_t pos = 0;
        const long v = std::stol(parts.at(i), &pos);
        if (pos != parts[i].size() || v < 0) throw std::invalid_argument(parts[i]);
        return static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        throw ConfigError("bad number in arch entry '" + item + "'");
      }
    };
    LayerSpec s;
    if (!parts.empty() && parts[0] == "dense" && parts.size() == 2) {
      s.kind = LayerKind::dense;
      s.out = num(1);
    } else if (!parts.empty() && parts[0] == "conv" && (parts.size() == 5 || parts.size() == 6)) {
      s.kind = LayerKind::conv;
      s.out = num(1);
      s.kernel = num(2);
      s.stride = num(3);
      s.padding = num(4);
      if (parts.size() == 6) s.pool = num(5);
      if (s.kernel == 0 || s.stride == 0 || s.pool == 0)
        throw ConfigError("conv kernel, stride and pool must be positive in '" + item + "'");
    } else {
      throw ConfigError("arch entry '" + item + "' is neither dense:<out> nor conv:<out>:<k>:<stride>:<pad>[:<pool>]");
    }
    if (s.out == 0) throw ConfigError("layer width must be positive in '" + item + "'");
    specs.push_back(s);
  }
  if (specs.empty()) throw ConfigError("empty architecture");
  return specs;
}

struct QuantLayerState {
  LayerGeometry geom;
  Var weight;  // full precision, trained
  Var bias;
  QuantSpec spec_w;
  QuantSpec spec_a{8, Granularity::per_layer, QuantMode::activations};
  bool quantize_weights = true;
  bool quantize_activations = false;
  std::shared_ptr<const WeightQuantizer> quantizer;
  std::optional<QuantResult> w_q;  // refreshed at the quantizing frequency
  Tensor w_q_values;               // dequantize(*w_q)
  EmaScaleObserver act_observer;

  /// Re-quantizes the current weights, warm-starting from the cached result.
  void refresh_quantized() {
    if (!quantize_weights) {
      w_q_values = weight.value();
      return;
    }
    w_q = quantizer->quantize(weight.value(), w_q ? &*w_q : nullptr);
    w_q_values = dequantize(*w_q);
  }

  /// Scale used to quantize this layer's input, once known.
  std::optional<float> activation_scale() const {
    if (!quantize_activations || !act_observer.initialized()) return std::nullopt;
    return act_observer.gamma();
  }
};

/// Which weights enter the forward pass.
enum class WeightPath { full, blended, quantized, straight_through };
/// What happens to each quantized layer's input.
enum class ActivationPath { full, blended, quantized, straight_through };

struct ForwardOptions {
  WeightPath weights = WeightPath::full;
  ActivationPath activations = ActivationPath::full;
  float alpha = 0.0f;
  bool observe = false;   // fold batch activation scales into the EMA observers
  bool ste_clip = true;   // clipped straight-through for 1-bit tensors
};

/// Optional capture of per-layer intermediates.
struct ForwardTrace {
  std::vector<Tensor> layer_inputs;      // input actually fed to each layer
  std::vector<Tensor> pre_activations;   // W a + b
};

class Network {
 public:
  Network() = default;

  /// Builds layers for inputs of shape C x H x W. Hidden layers use
  /// `hidden_activation`; the last layer has none.
  static Network build(const Shape& input_shape, const std::vector<LayerSpec>& arch, Activation hidden_activation,
                       std::uint64_t seed) {
    if (input_shape.size() != 3) throw ConfigError("network input shape must be C x H x W");
    Network net;
    net.input_shape_ = input_shape;
    std::mt19937_64 rng(seed);
    std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
    bool flat = false;
    std::size_t features = c * h * w;
    for (std::size_t i = 0; i < arch.size(); ++i) {
      const LayerSpec& s = arch[i];
      LayerGeometry g;
      g.kind = s.kind;
      g.out = s.out;
      g.activation = (i + 1 == arch.size()) ? Activation::none : hidden_activation;
      if (s.kind == LayerKind::conv) {
        if (flat) throw ConfigError("conv layer after a dense layer");
        g.in = c;
        g.kernel = s.kernel;
        g.stride = s.stride;
        g.padding = s.padding;
        g.pool = s.pool;
        if (s.kernel > h + 2 * s.padding || s.kernel > w + 2 * s.padding)
          throw ConfigError("conv kernel larger than its padded input");
        h = (h + 2 * s.padding - s.kernel) / s.stride + 1;
        w = (w + 2 * s.padding - s.kernel) / s.stride + 1;
        if (s.pool > h || s.pool > w) throw ConfigError("pool window larger than the conv output");
        h /= s.pool;
        w /= s.pool;
        c = s.out;
        features = c * h * w;
      } else {
        g.in = features;
        flat = true;
        features = s.out;
      }
      QuantLayerState layer;
      layer.geom = g;
      Tensor weight(g.weight_shape());
      const float bound = std::sqrt(6.0f / static_cast<float>(g.fan_in()));
      std::uniform_real_distribution<float> dist(-bound, bound);
      for (auto& v : weight.data()) v = dist(rng);
      layer.weight = Var::parameter(std::move(weight));
      layer.bias = Var::parameter(Tensor(Shape{g.out}));
      layer.quantizer = std::make_shared<PpqQuantizer>(layer.spec_w);
      net.layers_.push_back(std::move(layer));
    }
    return net;
  }

  /// Wraps pre-built layers (checkpoint restore, tests).
  static Network from_layers(Shape input_shape, std::vector<QuantLayerState> layers) {
    Network net;
    net.input_shape_ = std::move(input_shape);
    net.layers_ = std::move(layers);
    return net;
  }

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::vector<QuantLayerState>& layers() noexcept { return layers_; }
  const std::vector<QuantLayerState>& layers() const noexcept { return layers_; }
  std::size_t output_size() const { return layers_.back().geom.out; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.value().size() + l.bias.value().size();
    return n;
  }

  void refresh_quantized() {
    for (auto& l : layers_) l.refresh_quantized();
  }

  void zero_grad() {
    for (auto& l : layers_) {
      l.weight.zero_grad();
      l.bias.zero_grad();
    }
  }

  /// Runs the stack on an N x C x H x W batch; returns N x classes logits.
  Var forward(const Tensor& batch, const ForwardOptions& opt, ForwardTrace* trace = nullptr) {
    if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != input_shape_) {
      throw DimensionError("batch " + shape_str(batch.shape()) + " does not match network input " +
                           shape_str(input_shape_));
    }
    Var a = Var::constant(batch);
    for (auto& layer : layers_) {
      const LayerGeometry& g = layer.geom;
      if (g.kind == LayerKind::dense && a.shape().size() != 2) a = flatten(a);
      a = layer_input(layer, a, opt);
      if (trace) trace->layer_inputs.push_back(a.value());
      Var w = layer_weight(layer, opt);
      Var z = g.kind == LayerKind::conv ? conv2d(a, w, layer.bias, g.stride, g.padding) : linear(a, w, layer.bias);
      if (trace) trace->pre_activations.push_back(z.value());
      switch (g.activation) {
        case Activation::relu: a = relu(z); break;
        case Activation::hardtanh: a = hardtanh(z); break;
        case Activation::none: a = z; break;
      }
      if (g.kind == LayerKind::conv && g.pool > 1) a = max_pool2d(a, g.pool);
    }
    return a;
  }

 private:
  static Var layer_weight(QuantLayerState& layer, const ForwardOptions& opt) {
    if (opt.weights == WeightPath::full || !layer.quantize_weights) return layer.weight;
    if (layer.w_q_values.empty()) layer.refresh_quantized();
    switch (opt.weights) {
      case WeightPath::quantized: return Var::constant(layer.w_q_values);
      case WeightPath::blended: return blend(layer.weight, layer.w_q_values, opt.alpha);
      case WeightPath::straight_through:
        return straight_through(layer.weight, layer.w_q_values, opt.ste_clip && layer.spec_w.bits == 1);
      case WeightPath::full: break;
    }
    return layer.weight;
  }

  static Var layer_input(QuantLayerState& layer, const Var& a, const ForwardOptions& opt) {
    if (!layer.quantize_activations) return a;
    if (opt.observe) observe_activation(layer.act_observer, a.value(), layer.spec_a);
    const auto gamma = layer.activation_scale();
    if (!gamma || opt.activations == ActivationPath::full) return a;
    Tensor fq = fake_quantize(a.value(), *gamma, layer.spec_a.bits);
    switch (opt.activations) {
      case ActivationPath::quantized: return Var::constant(std::move(fq));
      case ActivationPath::blended: return blend(a, fq, opt.alpha);
      case ActivationPath::straight_through:
        return straight_through(a, fq, opt.ste_clip && layer.spec_a.bits == 1);
      case ActivationPath::full: break;
    }
    return a;
  }

  Shape input_shape_;
  std::vector<QuantLayerState> layers_;
};

}  // namespace abq
