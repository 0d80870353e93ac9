#pragma once

// Integer forward pass: int8 codes, exact int32 accumulation, then
// (gamma_w * gamma_a) * acc + bias with the bias held in 32-bit fixed point.

#include <abq/network.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <vector>

namespace abq {

/// Signed codes in an 8-bit container, restricted to the n-bit code set.
struct IntTensor {
  BasicTensor<std::int8_t> codes;
  int bits = 8;

  IntTensor() = default;
  IntTensor(Shape shape, std::span<const std::int32_t> q, int n) : codes(std::move(shape)), bits(n) {
    if (n < 1 || n > 8) throw SpecError("integer path supports 1..8 bit codes, got " + std::to_string(n));
    if (q.size() != codes.size()) throw DimensionError("code count does not match shape");
    const std::int32_t lim = code_max(n);
    for (std::size_t i = 0; i < q.size(); ++i) {
      if (q[i] < -lim || q[i] > lim || (n == 1 && q[i] == 0)) {
        throw SpecError("code " + std::to_string(q[i]) + " outside the " + std::to_string(n) + "-bit code set");
      }
      codes[i] = static_cast<std::int8_t>(q[i]);
    }
  }

  const Shape& shape() const noexcept { return codes.shape(); }
};

using AccTensor = BasicTensor<std::int32_t>;

/// Throws unless a k-term dot product of codes can never leave int32.
inline void check_accumulator_capacity(std::size_t k, int bits_a, int bits_b) {
  const long double worst = static_cast<long double>(k) * code_max(bits_a) * code_max(bits_b);
  if (worst >= static_cast<long double>(std::numeric_limits<std::int32_t>::max())) {
    throw CapacityError("int32 accumulator may overflow: " + std::to_string(k) + " terms of " +
                        std::to_string(bits_a) + "x" + std::to_string(bits_b) + "-bit codes");
  }
}

/// q_w[m x k] * q_a[k x n] with exact int32 dot products.
inline AccTensor int_gemm(const IntTensor& q_w, const IntTensor& q_a) {
  if (q_w.codes.rank() != 2 || q_a.codes.rank() != 2 || q_w.codes.dim(1) != q_a.codes.dim(0)) {
    throw DimensionError("int_gemm shape mismatch " + shape_str(q_w.shape()) + " * " + shape_str(q_a.shape()));
  }
  check_accumulator_capacity(q_w.codes.dim(1), q_w.bits, q_a.bits);
  return kernels::gemm_accumulate<std::int32_t>(q_w.codes, q_a.codes);
}

/// Integer cross-correlation of activation codes q_a (N x C x H x W) with
/// kernel codes q_w (O x C x kh x kw).
inline AccTensor int_conv2d(const IntTensor& q_w, const IntTensor& q_a, std::size_t stride, std::size_t padding) {
  if (q_w.codes.rank() != 4) throw DimensionError("int_conv2d kernel must be O x C x kh x kw");
  check_accumulator_capacity(q_w.codes.dim(1) * q_w.codes.dim(2) * q_w.codes.dim(3), q_w.bits, q_a.bits);
  return kernels::conv2d_accumulate<std::int32_t>(q_a.codes, q_w.codes, stride, padding);
}

/// q_a (N x I) against q_w (O x I): the dense layer in row-per-sample layout.
inline AccTensor int_linear(const IntTensor& q_w, const IntTensor& q_a) {
  check_accumulator_capacity(q_w.codes.dim(1), q_w.bits, q_a.bits);
  return kernels::linear_accumulate<std::int32_t>(q_a.codes, q_w.codes);
}

inline constexpr int kBiasFractionBits = 16;

inline std::int32_t to_fixed_point(float v, int fraction_bits = kBiasFractionBits) {
  const double scaled = std::round(static_cast<double>(v) * std::ldexp(1.0, fraction_bits));
  if (scaled >= 2147483647.0 || scaled <= -2147483648.0) {
    throw CapacityError("bias " + std::to_string(v) + " does not fit 32-bit fixed point with " +
                        std::to_string(fraction_bits) + " fraction bits");
  }
  return static_cast<std::int32_t>(scaled);
}

inline float from_fixed_point(std::int32_t v, int fraction_bits = kBiasFractionBits) {
  return static_cast<float>(std::ldexp(static_cast<double>(v), -fraction_bits));
}

struct QuantizedLayer {
  LayerGeometry geom;
  IntTensor q_w;
  std::vector<float> weight_scale;    // gamma_w, 1 or per output channel
  float act_scale = 1.0f;             // frozen gamma_a of this layer's input
  int act_bits = 8;
  std::vector<float> combined_scale;  // gamma_w * gamma_a per output channel
  std::vector<std::int32_t> bias;     // fixed point
  int bias_fraction_bits = kBiasFractionBits;

  static QuantizedLayer from_state(const QuantLayerState& s) {
    if (!s.quantize_weights || !s.w_q) throw SpecError("integer path needs quantized weights");
    const auto gamma_a = s.activation_scale();
    if (!gamma_a) throw SpecError("integer path needs a calibrated activation scale for every layer");
    QuantizedLayer l;
    l.geom = s.geom;
    l.q_w = IntTensor(s.w_q->shape, s.w_q->q, s.w_q->bits);
    l.weight_scale = s.w_q->gamma;
    l.act_scale = *gamma_a;
    l.act_bits = s.spec_a.bits;
    if (l.act_bits > 8) throw SpecError("integer path supports activations up to 8 bits");
    check_accumulator_capacity(s.geom.fan_in(), l.q_w.bits, l.act_bits);
    l.combined_scale.resize(s.geom.out);
    for (std::size_t o = 0; o < s.geom.out; ++o) {
      const float gw = l.weight_scale.size() == 1 ? l.weight_scale[0] : l.weight_scale[o];
      l.combined_scale[o] = gw * l.act_scale;
      if (!(l.combined_scale[o] > 0.0f)) throw SpecError("combined scale must be positive");
    }
    l.bias.resize(s.geom.out);
    for (std::size_t o = 0; o < s.geom.out; ++o) l.bias[o] = to_fixed_point(s.bias.value()[o]);
    return l;
  }
};

inline Tensor apply_activation(Tensor z, Activation act) {
  for (auto& v : z.data()) {
    if (act == Activation::relu) v = v > 0.0f ? v : 0.0f;
    else if (act == Activation::hardtanh) v = std::clamp(v, -1.0f, 1.0f);
  }
  return z;
}

/// combined_scale * acc + bias for every output element (channel = axis 1).
inline Tensor rescale_accumulator(const QuantizedLayer& layer, const AccTensor& acc) {
  Tensor z(acc.shape());
  const std::size_t channels = acc.dim(1);
  const std::size_t inner = acc.size() / (acc.dim(0) * channels);
  for (std::size_t i = 0; i < acc.size(); ++i) {
    const std::size_t c = (i / inner) % channels;
    z[i] = layer.combined_scale[c] * static_cast<float>(acc[i]) + from_fixed_point(layer.bias[c], layer.bias_fraction_bits);
  }
  return z;
}

/// Pre-activation of one layer given input codes.
inline Tensor quantized_pre_activation(const QuantizedLayer& layer, const IntTensor& q_a) {
  const AccTensor acc = layer.geom.kind == LayerKind::conv
                            ? int_conv2d(layer.q_w, q_a, layer.geom.stride, layer.geom.padding)
                            : int_linear(layer.q_w, q_a);
  return rescale_accumulator(layer, acc);
}

/// delta((gamma_w gamma_a) (q_w . q_a) + b). `gamma_a` must be the frozen
/// scale the codes were produced with.
inline Tensor quantized_forward(const QuantizedLayer& layer, const IntTensor& q_a, float gamma_a) {
  if (gamma_a != layer.act_scale) throw SpecError("activation codes were produced with a different scale");
  return apply_activation(quantized_pre_activation(layer, q_a), layer.geom.activation);
}

/// Whole network on the integer path.
class IntNetwork {
 public:
  static IntNetwork from(const Network& net) {
    IntNetwork n;
    n.input_shape_ = net.input_shape();
    for (const auto& l : net.layers()) n.layers_.push_back(QuantizedLayer::from_state(l));
    return n;
  }

  const std::vector<QuantizedLayer>& layers() const noexcept { return layers_; }

  /// Logits for an N x C x H x W batch; optionally records every pre-activation.
  Tensor forward(const Tensor& batch, std::vector<Tensor>* pre_activations = nullptr) const {
    Tensor a = batch;
    for (const auto& layer : layers_) {
      if (layer.geom.kind == LayerKind::dense && a.rank() != 2) a = a.reshaped(Shape{a.dim(0), a.size() / a.dim(0)});
      const auto q = quantize_with_scale(a.data(), layer.act_scale, layer.act_bits);
      const IntTensor q_a(a.shape(), q, layer.act_bits);
      Tensor z = quantized_pre_activation(layer, q_a);
      if (pre_activations) pre_activations->push_back(z);
      a = apply_activation(std::move(z), layer.geom.activation);
      if (layer.geom.kind == LayerKind::conv && layer.geom.pool > 1) a = kernels::max_pool2d(a, layer.geom.pool);
    }
    return a;
  }

 private:
  Shape input_shape_;
  std::vector<QuantizedLayer> layers_;
};

inline std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t k = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (logits[row * k + j] > logits[row * k + best]) best = j;
  return best;
}

/// Distance in units in the last place between two finite floats.
inline std::uint64_t ulp_distance(float a, float b) {
  auto key = [](float f) -> std::int64_t {
    std::int32_t i;
    std::memcpy(&i, &f, sizeof i);
    return i < 0 ? static_cast<std::int64_t>(std::numeric_limits<std::int32_t>::min()) - i : i;
  };
  const std::int64_t d = key(a) - key(b);
  return static_cast<std::uint64_t>(d < 0 ? -d : d);
}

}  // namespace abq
