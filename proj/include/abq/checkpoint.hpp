#pragma once

// ABQ1 checkpoint: little-endian, explicit widths. Byte layout is documented
// in docs/formats.md.

#include <abq/network.hpp>
#include <abq/optim.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace abq {

inline constexpr char kCheckpointMagic[4] = {'A', 'B', 'Q', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ModelKind : std::uint8_t { cnn = 0, toy = 1 };

struct CheckpointLayer {
  LayerGeometry geom;
  std::uint8_t weight_bits = 8;  // 32: weights left in full precision
  std::uint8_t act_bits = 0;     // 0: activations not quantized
  Granularity granularity = Granularity::per_layer;
  bool scaled_binary = false;
  std::vector<float> weights;  // empty in inference-only checkpoints
  std::vector<float> bias;
  std::vector<std::int8_t> codes;  // empty when weights are not quantized
  std::vector<float> gamma;
  float act_gamma = 0.0f;
  bool act_initialized = false;
  std::vector<float> velocity_w;  // optional optimizer state
  std::vector<float> velocity_b;

  friend bool operator==(const CheckpointLayer&, const CheckpointLayer&) = default;
};

struct Checkpoint {
  ModelKind model = ModelKind::cnn;
  std::uint64_t step = 0;
  float alpha = 0.0f;
  std::uint64_t config_hash = 0;
  std::uint32_t input_c = 1, input_h = 1, input_w = 1;
  bool has_fp_weights = true;
  bool has_optimizer_state = false;
  std::vector<CheckpointLayer> layers;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32s(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  const std::vector<std::uint8_t>& bytes() const noexcept { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_++]} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b_[pos_++]} << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::vector<float> f32s(std::size_t n) {
    need(4 * n);
    std::vector<float> v(n);
    for (auto& x : v) x = f32();
    return v;
  }
  std::vector<std::int8_t> i8s(std::size_t n) {
    need(n);
    std::vector<std::int8_t> v(n);
    std::memcpy(v.data(), b_.data() + pos_, n);
    pos_ += n;
    return v;
  }
  bool at_end() const noexcept { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

inline std::uint8_t checked_u8(std::uint8_t v, std::uint8_t max, const char* what) {
  if (v > max) throw FormatError(std::string("checkpoint has invalid ") + what + " " + std::to_string(v));
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32((c.has_fp_weights ? 1u : 0u) | (c.has_optimizer_state ? 2u : 0u));
  w.u8(static_cast<std::uint8_t>(c.model));
  w.u64(c.step);
  w.f32(c.alpha);
  w.u64(c.config_hash);
  w.u32(c.input_c);
  w.u32(c.input_h);
  w.u32(c.input_w);
  w.u32(static_cast<std::uint32_t>(c.layers.size()));
  for (const auto& l : c.layers) {
    const std::size_t count = numel(l.geom.weight_shape());
    if (c.has_fp_weights && l.weights.size() != count) throw FormatError("layer weight count does not match geometry");
    if (l.bias.size() != l.geom.out) throw FormatError("layer bias count does not match geometry");
    if (!l.codes.empty() && l.codes.size() != count) throw FormatError("layer code count does not match geometry");
    w.u8(static_cast<std::uint8_t>(l.geom.kind));
    w.u8(static_cast<std::uint8_t>(l.geom.activation));
    w.u8(l.weight_bits);
    w.u8(l.act_bits);
    w.u8(static_cast<std::uint8_t>(l.granularity));
    w.u8(l.scaled_binary ? 1 : 0);
    w.u8(l.codes.empty() ? 0 : 1);
    w.u32(static_cast<std::uint32_t>(l.geom.out));
    w.u32(static_cast<std::uint32_t>(l.geom.in));
    w.u32(static_cast<std::uint32_t>(l.geom.kernel));
    w.u32(static_cast<std::uint32_t>(l.geom.stride));
    w.u32(static_cast<std::uint32_t>(l.geom.padding));
    w.u32(static_cast<std::uint32_t>(l.geom.pool));
    if (c.has_fp_weights) w.f32s(l.weights);
    w.f32s(l.bias);
    if (!l.codes.empty()) {
      w.raw(l.codes.data(), l.codes.size());
      w.u32(static_cast<std::uint32_t>(l.gamma.size()));
      w.f32s(l.gamma);
    }
    w.f32(l.act_gamma);
    w.u8(l.act_initialized ? 1 : 0);
    if (c.has_optimizer_state) {
      w.u8(l.velocity_w.empty() ? 0 : 1);
      if (!l.velocity_w.empty()) w.f32s(l.velocity_w);
      w.u8(l.velocity_b.empty() ? 0 : 1);
      if (!l.velocity_b.empty()) w.f32s(l.velocity_b);
    }
  }
  return w.bytes();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.u8());
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("not an ABQ1 checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t flags = r.u32();
  if (flags & ~3u) throw FormatError("unknown checkpoint flags");
  Checkpoint c;
  c.has_fp_weights = flags & 1u;
  c.has_optimizer_state = flags & 2u;
  c.model = static_cast<ModelKind>(detail::checked_u8(r.u8(), 1, "model kind"));
  c.step = r.u64();
  c.alpha = r.f32();
  c.config_hash = r.u64();
  c.input_c = r.u32();
  c.input_h = r.u32();
  c.input_w = r.u32();
  const std::uint32_t n_layers = r.u32();
  if (n_layers == 0 || n_layers > 4096) throw FormatError("implausible layer count " + std::to_string(n_layers));
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    CheckpointLayer l;
    l.geom.kind = static_cast<LayerKind>(detail::checked_u8(r.u8(), 1, "layer kind"));
    l.geom.activation = static_cast<Activation>(detail::checked_u8(r.u8(), 2, "activation"));
    l.weight_bits = r.u8();
    l.act_bits = r.u8();
    l.granularity = static_cast<Granularity>(detail::checked_u8(r.u8(), 1, "granularity"));
    l.scaled_binary = detail::checked_u8(r.u8(), 1, "scaled flag") != 0;
    const bool has_codes = detail::checked_u8(r.u8(), 1, "codes flag") != 0;
    l.geom.out = r.u32();
    l.geom.in = r.u32();
    l.geom.kernel = r.u32();
    l.geom.stride = r.u32();
    l.geom.padding = r.u32();
    l.geom.pool = r.u32();
    if (l.geom.out == 0 || l.geom.in == 0 || l.geom.kernel == 0 || l.geom.stride == 0 || l.geom.pool == 0) {
      throw FormatError("layer " + std::to_string(i) + " has a zero extent");
    }
    const std::size_t count = numel(l.geom.weight_shape());
    if (c.has_fp_weights) l.weights = r.f32s(count);
    l.bias = r.f32s(l.geom.out);
    if (has_codes) {
      l.codes = r.i8s(count);
      const std::uint32_t glen = r.u32();
      if (glen != 1 && glen != l.geom.out) {
        throw FormatError("layer " + std::to_string(i) + " scale vector has length " + std::to_string(glen) +
                          ", expected 1 or " + std::to_string(l.geom.out));
      }
      if ((l.granularity == Granularity::per_channel) != (glen == l.geom.out && l.geom.out > 1) && l.geom.out > 1) {
        throw FormatError("layer " + std::to_string(i) + " scale count does not match its granularity");
      }
      l.gamma = r.f32s(glen);
    }
    l.act_gamma = r.f32();
    l.act_initialized = detail::checked_u8(r.u8(), 1, "observer flag") != 0;
    if (c.has_optimizer_state) {
      if (r.u8()) l.velocity_w = r.f32s(count);
      if (r.u8()) l.velocity_b = r.f32s(l.geom.out);
    }
    c.layers.push_back(std::move(l));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

/// Drops full-precision weights and optimizer state (deployment form).
inline Checkpoint strip_checkpoint(Checkpoint c) {
  for (auto& l : c.layers) {
    if (l.codes.empty()) throw FormatError("cannot strip a layer without quantized codes");
    l.weights.clear();
    l.velocity_w.clear();
    l.velocity_b.clear();
  }
  c.has_fp_weights = false;
  c.has_optimizer_state = false;
  return c;
}

/// Captures a network (and optionally optimizer buffers) into a checkpoint.
inline Checkpoint snapshot(const Network& net, ModelKind model, std::uint64_t step, float alpha,
                           std::uint64_t config_hash, const SgdOptimizer* optimizer = nullptr) {
  Checkpoint c;
  c.model = model;
  c.step = step;
  c.alpha = alpha;
  c.config_hash = config_hash;
  c.input_c = static_cast<std::uint32_t>(net.input_shape()[0]);
  c.input_h = static_cast<std::uint32_t>(net.input_shape()[1]);
  c.input_w = static_cast<std::uint32_t>(net.input_shape()[2]);
  c.has_optimizer_state = optimizer != nullptr && optimizer->momentum() != 0.0f;
  for (const auto& s : net.layers()) {
    CheckpointLayer l;
    l.geom = s.geom;
    l.weight_bits = static_cast<std::uint8_t>(s.quantize_weights ? s.spec_w.bits : kPassthroughBits);
    l.act_bits = static_cast<std::uint8_t>(s.quantize_activations ? s.spec_a.bits : 0);
    l.granularity = s.spec_w.granularity;
    l.scaled_binary = s.spec_w.scaled_binary;
    l.weights = s.weight.value().vec();
    l.bias = s.bias.value().vec();
    if (s.quantize_weights && s.w_q) {
      if (s.w_q->bits > 8) throw SpecError("checkpoint codes are stored as signed bytes; bits must be <= 8");
      l.codes.assign(s.w_q->q.begin(), s.w_q->q.end());
      l.gamma = s.w_q->gamma;
    }
    l.act_gamma = s.act_observer.gamma();
    l.act_initialized = s.act_observer.initialized();
    if (c.has_optimizer_state) {
      if (const Tensor* v = optimizer->velocity(s.weight)) l.velocity_w = v->vec();
      if (const Tensor* v = optimizer->velocity(s.bias)) l.velocity_b = v->vec();
    }
    c.layers.push_back(std::move(l));
  }
  return c;
}

/// Rebuilds layer state from a checkpoint. Inference-only checkpoints get
/// their dequantized codes as the full-precision weights.
inline Network network_from_checkpoint(const Checkpoint& c, float ema_beta = 0.99f) {
  std::vector<QuantLayerState> layers;
  for (const auto& l : c.layers) {
    QuantLayerState s;
    s.geom = l.geom;
    const Shape wshape = l.geom.weight_shape();
    s.quantize_weights = l.weight_bits != kPassthroughBits;
    s.spec_w = QuantSpec{s.quantize_weights ? l.weight_bits : 8, l.granularity, QuantMode::weights, l.scaled_binary};
    s.quantize_activations = l.act_bits != 0;
    s.spec_a = QuantSpec{s.quantize_activations ? l.act_bits : 8, Granularity::per_layer, QuantMode::activations};
    s.quantizer = std::make_shared<PpqQuantizer>(s.spec_w);
    if (!l.codes.empty()) {
      QuantResult q;
      q.shape = wshape;
      q.q.assign(l.codes.begin(), l.codes.end());
      q.gamma = l.gamma;
      q.bits = s.spec_w.bits;
      q.granularity = l.gamma.size() > 1 ? Granularity::per_channel : l.granularity;
      q.degenerate_channels.resize(l.gamma.size());
      for (std::size_t i = 0; i < l.gamma.size(); ++i) {
        q.degenerate_channels[i] = l.gamma[i] == kDegenerateScale;
        q.degenerate = q.degenerate || q.degenerate_channels[i];
      }
      s.w_q = std::move(q);
      s.w_q_values = dequantize(*s.w_q);
    }
    if (!l.weights.empty()) {
      s.weight = Var::parameter(Tensor(wshape, l.weights));
    } else if (s.w_q) {
      s.weight = Var::parameter(s.w_q_values);
    } else {
      throw FormatError("checkpoint layer has neither weights nor codes");
    }
    if (!s.quantize_weights) s.w_q_values = s.weight.value();
    s.bias = Var::parameter(Tensor(Shape{l.geom.out}, l.bias));
    s.act_observer = EmaScaleObserver(ema_beta);
    s.act_observer.restore(l.act_gamma, l.act_initialized);
    layers.push_back(std::move(s));
  }
  return Network::from_layers(Shape{c.input_c, c.input_h, c.input_w}, std::move(layers));
}

/// Copies checkpoint state into an existing network of the same topology.
inline void restore_into(Network& net, const Checkpoint& c, SgdOptimizer* optimizer = nullptr) {
  if (c.layers.size() != net.layers().size() ||
      Shape{c.input_c, c.input_h, c.input_w} != net.input_shape()) {
    throw FormatError("checkpoint topology does not match the network");
  }
  if (!c.has_fp_weights) throw FormatError("cannot resume training from an inference-only checkpoint");
  for (std::size_t i = 0; i < c.layers.size(); ++i) {
    const CheckpointLayer& l = c.layers[i];
    QuantLayerState& s = net.layers()[i];
    if (!(l.geom == s.geom)) throw FormatError("checkpoint layer " + std::to_string(i) + " geometry mismatch");
    s.weight.mutable_value() = Tensor(s.geom.weight_shape(), l.weights);
    s.bias.mutable_value() = Tensor(Shape{s.geom.out}, l.bias);
    if (!l.codes.empty()) {
      QuantResult q;
      q.shape = s.geom.weight_shape();
      q.q.assign(l.codes.begin(), l.codes.end());
      q.gamma = l.gamma;
      q.bits = l.weight_bits;
      q.granularity = l.granularity;
      q.degenerate_channels.resize(l.gamma.size());
      for (std::size_t k = 0; k < l.gamma.size(); ++k) {
        q.degenerate_channels[k] = l.gamma[k] == kDegenerateScale;
        q.degenerate = q.degenerate || q.degenerate_channels[k];
      }
      s.w_q = std::move(q);
      s.w_q_values = dequantize(*s.w_q);
    }
    s.act_observer.restore(l.act_gamma, l.act_initialized);
    if (optimizer && c.has_optimizer_state) {
      if (!l.velocity_w.empty()) optimizer->set_velocity(s.weight, Tensor(s.geom.weight_shape(), l.velocity_w));
      if (!l.velocity_b.empty()) optimizer->set_velocity(s.bias, Tensor(Shape{s.geom.out}, l.velocity_b));
    }
  }
}

}  // namespace abq
