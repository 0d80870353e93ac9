#pragma once

// Symmetric quantization: progressive projection (alternating rounding and
// least-squares scale), 1-bit sign binarization, per-channel application and
// the EMA observer for activation scales.

#include <abq/autograd.hpp>
#include <abq/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace abq {

enum class Granularity : std::uint8_t { per_layer = 0, per_channel = 1 };
enum class QuantMode : std::uint8_t { weights = 0, activations = 1 };

inline constexpr int kMaxBits = 16;
inline constexpr int kDefaultPpqIterations = 10;
/// Scale reported for an all-zero input.
inline constexpr float kDegenerateScale = std::numeric_limits<float>::min();

/// Largest code magnitude: 1 for the binary set {-1,+1}, 2^(n-1)-1 otherwise.
constexpr std::int32_t code_max(int bits) { return bits <= 1 ? 1 : (std::int32_t{1} << (bits - 1)) - 1; }

struct QuantSpec {
  int bits = 8;
  Granularity granularity = Granularity::per_layer;
  QuantMode mode = QuantMode::weights;
  /// 1-bit only: scale by mean |x| instead of the plain gamma = 1.
  bool scaled_binary = false;
  int max_iterations = kDefaultPpqIterations;

  void validate() const {
    if (bits < 1 || bits > kMaxBits) throw SpecError("bit width must be in [1, 16], got " + std::to_string(bits));
    if (max_iterations < 1) throw SpecError("max_iterations must be >= 1");
  }
};

/// Codes plus scale(s). A per-channel result carries one scale per slice of
/// the leading axis.
struct QuantResult {
  Shape shape;
  std::vector<std::int32_t> q;
  std::vector<float> gamma;
  Granularity granularity = Granularity::per_layer;
  int bits = 8;
  int iterations = 0;
  bool converged = true;
  bool degenerate = false;
  std::vector<std::uint8_t> degenerate_channels;

  std::size_t channels() const noexcept { return gamma.size(); }
  float scale_for(std::size_t flat_index) const {
    if (gamma.size() == 1) return gamma[0];
    return gamma[flat_index / (q.size() / gamma.size())];
  }

  friend bool operator==(const QuantResult&, const QuantResult&) = default;
};

inline double round_half_away(double v) { return std::round(v); }

/// clamp(round_half_away(v), -qmax, qmax) without a libm call; exact because
/// v - trunc(v) is exact in double.
inline std::int32_t round_clamp(double v, std::int32_t qmax) {
  const double lim = static_cast<double>(qmax) + 1.0;
  v = std::min(std::max(v, -lim), lim);
  const auto t = static_cast<std::int32_t>(v);
  const double frac = v - static_cast<double>(t);
  const std::int32_t i = t + static_cast<std::int32_t>(frac >= 0.5) - static_cast<std::int32_t>(frac <= -0.5);
  return std::min(std::max(i, -qmax), qmax);
}

inline std::int32_t quantize_code(double x, double gamma, int bits) {
  if (bits == 1) return x >= 0.0 ? 1 : -1;
  return round_clamp(x / gamma, code_max(bits));
}

/// Outcome of the scalar-scale projection on one flat vector.
struct PpqOutcome {
  std::vector<std::int32_t> q;
  double gamma = 0.0;
  int iterations = 0;
  bool converged = false;
  bool degenerate = false;
};

inline double reconstruction_error(std::span<const float> x, std::span<const std::int32_t> q, double gamma) {
  double e = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - gamma * q[i];
    e += d * d;
  }
  return e;
}

namespace detail {

inline void project_codes(const float* __restrict x, std::int32_t* __restrict q, std::size_t n, double gamma,
                          std::int32_t qmax) {
  for (std::size_t i = 0; i < n; ++i) q[i] = round_clamp(static_cast<double>(x[i]) / gamma, qmax);
}

/// (<x,q>, <q,q>) with four fixed interleaved partial sums, so the reduction
/// order never depends on the compiler.
inline std::pair<double, double> dot_and_norm(std::span<const float> x, std::span<const std::int32_t> q) {
  double n[4] = {0, 0, 0, 0}, d[4] = {0, 0, 0, 0};
  const std::size_t m = x.size() & ~std::size_t{3};
  for (std::size_t i = 0; i < m; i += 4)
    for (std::size_t j = 0; j < 4; ++j) {
      const double qj = q[i + j];
      n[j] += static_cast<double>(x[i + j]) * qj;
      d[j] += qj * qj;
    }
  for (std::size_t i = m; i < x.size(); ++i) {
    const double qi = q[i];
    n[0] += static_cast<double>(x[i]) * qi;
    d[0] += qi * qi;
  }
  return {(n[0] + n[1]) + (n[2] + n[3]), (d[0] + d[1]) + (d[2] + d[3])};
}

}  // namespace detail

/// Progressive projection on a flat vector. Repeats
///   q <- clamp(round(x / gamma)),  gamma <- <x,q> / <q,q>
/// until gamma repeats (exactly, or within 1e-12 relative) or the iteration
/// cap is hit. A non-positive warm start means "initialize from max|x|".
/// When `error_trace` is given, ||x - gamma q||^2 is appended after every
/// half-step.
inline PpqOutcome ppq_vector(std::span<const float> x, int bits, double warm_start = 0.0,
                             int max_iterations = kDefaultPpqIterations, std::vector<double>* error_trace = nullptr) {
  if (bits < 2 || bits > kMaxBits) {
    throw SpecError("ppq needs 2..16 bits (use binarize for 1 bit), got " + std::to_string(bits));
  }
  if (x.empty()) throw DimensionError("ppq on an empty vector");
  PpqOutcome out;
  out.q.assign(x.size(), 0);
  double max_abs = 0.0;
  for (float v : x) {
    if (!std::isfinite(v)) throw NumericError("ppq: non-finite input");
    max_abs = std::max(max_abs, std::fabs(static_cast<double>(v)));
  }
  if (max_abs == 0.0) {
    out.gamma = kDegenerateScale;
    out.degenerate = true;
    out.converged = true;
    return out;
  }
  const double qmax = code_max(bits);
  const double cold = max_abs / qmax;
  double gamma = warm_start > 0.0 ? warm_start : cold;
  for (int it = 1; it <= max_iterations; ++it) {
    const double gamma0 = gamma;
    const std::int32_t qm = code_max(bits);
    detail::project_codes(x.data(), out.q.data(), x.size(), gamma0, qm);
    const auto [num, den] = detail::dot_and_norm(x, out.q);
    out.iterations = it;
    if (den == 0.0) {
      // Warm start so large that every code rounded to zero.
      gamma = cold;
      continue;
    }
    if (error_trace) error_trace->push_back(reconstruction_error(x, out.q, gamma0));
    gamma = num / den;
    if (error_trace) error_trace->push_back(reconstruction_error(x, out.q, gamma));
    if (gamma == gamma0 || std::fabs(gamma - gamma0) <= 1e-12 * gamma0) {
      out.converged = true;
      break;
    }
  }
  out.gamma = gamma;
  return out;
}

/// 1-bit: q = sign(x) in {-1,+1}; gamma = 1, or mean |x| when `scaled`.
inline QuantResult binarize(const Tensor& x, bool scaled = false) {
  if (x.empty()) throw DimensionError("binarize on an empty tensor");
  QuantResult r;
  r.shape = x.shape();
  r.bits = 1;
  r.iterations = 1;
  r.q.resize(x.size());
  double abs_sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.q[i] = x[i] >= 0.0f ? 1 : -1;
    abs_sum += std::fabs(static_cast<double>(x[i]));
  }
  float g = 1.0f;
  if (scaled) {
    g = static_cast<float>(abs_sum / static_cast<double>(x.size()));
    if (!(g > 0.0f)) {
      g = kDegenerateScale;
      r.degenerate = true;
    }
  }
  r.gamma = {g};
  r.degenerate_channels = {static_cast<std::uint8_t>(r.degenerate)};
  return r;
}

namespace detail {

inline void quantize_slice(std::span<const float> x, const QuantSpec& spec, double warm, std::span<std::int32_t> q_out,
                           float& gamma_out, int& iterations, bool& converged, bool& degenerate) {
  if (spec.bits == 1) {
    Tensor slice(Shape{x.size()}, std::vector<float>(x.begin(), x.end()));
    QuantResult b = binarize(slice, spec.scaled_binary);
    std::copy(b.q.begin(), b.q.end(), q_out.begin());
    gamma_out = b.gamma[0];
    iterations = 1;
    converged = true;
    degenerate = b.degenerate;
    return;
  }
  PpqOutcome o = ppq_vector(x, spec.bits, warm, spec.max_iterations);
  std::copy(o.q.begin(), o.q.end(), q_out.begin());
  gamma_out = static_cast<float>(o.gamma);
  iterations = o.iterations;
  converged = o.converged;
  degenerate = o.degenerate;
}

}  // namespace detail

/// Per-channel quantization: one independent (q, gamma) per slice of the
/// leading (output-channel) axis. `warm_start` is either empty or one value
/// per channel.
inline QuantResult ppq_per_channel(const Tensor& x, QuantSpec spec, std::span<const float> warm_start = {}) {
  spec.validate();
  if (x.empty()) throw DimensionError("ppq_per_channel on an empty tensor");
  const std::size_t channels = x.dim(0);
  const std::size_t slice = x.size() / channels;
  if (!warm_start.empty() && warm_start.size() != channels) {
    throw DimensionError("per-channel warm start has " + std::to_string(warm_start.size()) + " entries for " +
                         std::to_string(channels) + " channels");
  }
  QuantResult r;
  r.shape = x.shape();
  r.bits = spec.bits;
  r.granularity = Granularity::per_channel;
  r.q.resize(x.size());
  r.gamma.resize(channels);
  r.degenerate_channels.resize(channels);
  auto xs = x.data();
  auto qs = std::span<std::int32_t>(r.q);
  for (std::size_t c = 0; c < channels; ++c) {
    int it = 0;
    bool conv = false, degen = false;
    detail::quantize_slice(xs.subspan(c * slice, slice), spec, warm_start.empty() ? 0.0 : warm_start[c],
                           qs.subspan(c * slice, slice), r.gamma[c], it, conv, degen);
    r.iterations = std::max(r.iterations, it);
    r.converged = r.converged && conv;
    r.degenerate_channels[c] = degen;
    r.degenerate = r.degenerate || degen;
  }
  return r;
}

/// Quantizes the whole tensor with one scale, or per channel when the spec
/// asks for it. A positive `warm_start` seeds the per-layer iteration.
inline QuantResult ppq(const Tensor& x, QuantSpec spec, std::optional<float> warm_start = std::nullopt) {
  spec.validate();
  if (spec.granularity == Granularity::per_channel) {
    if (warm_start) {
      std::vector<float> w(x.dim(0), *warm_start);
      return ppq_per_channel(x, spec, w);
    }
    return ppq_per_channel(x, spec);
  }
  if (spec.bits < 2) throw SpecError("ppq needs at least 2 bits; 1-bit tensors go through binarize");
  if (x.empty()) throw DimensionError("ppq on an empty tensor");
  PpqOutcome o = ppq_vector(x.data(), spec.bits, warm_start.value_or(0.0f), spec.max_iterations);
  QuantResult r;
  r.shape = x.shape();
  r.bits = spec.bits;
  r.q = std::move(o.q);
  r.gamma = {static_cast<float>(o.gamma)};
  r.iterations = o.iterations;
  r.converged = o.converged;
  r.degenerate = o.degenerate;
  r.degenerate_channels = {static_cast<std::uint8_t>(o.degenerate)};
  return r;
}

/// Elementwise gamma * q, scale broadcast per channel when there are several.
inline Tensor dequantize(const QuantResult& r) {
  Tensor out(r.shape);
  const std::size_t per = r.q.size() / r.gamma.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = r.gamma[i / per] * static_cast<float>(r.q[i]);
  return out;
}

/// Codes for `x` under a fixed scale (activations at inference time).
inline std::vector<std::int32_t> quantize_with_scale(std::span<const float> x, float gamma, int bits) {
  std::vector<std::int32_t> q(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) q[i] = quantize_code(x[i], gamma, bits);
  return q;
}

/// gamma * round(x / gamma) under a fixed scale, as floats.
inline Tensor fake_quantize(const Tensor& x, float gamma, int bits) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gamma * static_cast<float>(quantize_code(x[i], gamma, bits));
  return out;
}

/// Running activation scale: gamma_a <- beta * gamma_a + (1 - beta) * gamma_t,
/// seeded by the first non-degenerate batch.
class EmaScaleObserver {
 public:
  explicit EmaScaleObserver(float beta = 0.99f) : beta_(beta) {
    if (!(beta > 0.0f && beta < 1.0f)) throw ConfigError("EMA smoothing must lie in (0, 1)");
  }

  float beta() const noexcept { return beta_; }
  float gamma() const noexcept { return gamma_; }
  bool initialized() const noexcept { return initialized_; }

  /// Folds one batch scale into the running estimate.
  void update(float batch_gamma) {
    if (!initialized_) {
      gamma_ = batch_gamma;
      initialized_ = true;
      return;
    }
    gamma_ = static_cast<float>(static_cast<double>(beta_) * gamma_ + (1.0 - static_cast<double>(beta_)) * batch_gamma);
  }

  void restore(float gamma, bool initialized) {
    gamma_ = gamma;
    initialized_ = initialized;
  }

  friend bool operator==(const EmaScaleObserver&, const EmaScaleObserver&) = default;

 private:
  float beta_;
  float gamma_ = 0.0f;
  bool initialized_ = false;
};

/// Quantizes the batch to get its scale and folds it into the observer.
/// A zero batch leaves the observer untouched. Returns the batch scale.
/// Projection warm-starts from the running scale once there is one.
inline std::optional<float> observe_activation(EmaScaleObserver& obs, const Tensor& batch, QuantSpec spec) {
  if (spec.mode != QuantMode::activations) throw SpecError("observe_activation needs an activation spec");
  spec.granularity = Granularity::per_layer;
  const std::optional<float> warm = obs.initialized() ? std::optional<float>(obs.gamma()) : std::nullopt;
  QuantResult r = spec.bits == 1 ? binarize(batch, spec.scaled_binary) : ppq(batch, spec, warm);
  if (r.degenerate) return std::nullopt;
  if (spec.bits == 1 && !spec.scaled_binary) {
    bool any = std::any_of(batch.data().begin(), batch.data().end(), [](float v) { return v != 0.0f; });
    if (!any) return std::nullopt;
  }
  obs.update(r.gamma[0]);
  return r.gamma[0];
}

// ---------------------------------------------------------------------------
// Pluggable weight quantizers for the training loop.

class WeightQuantizer {
 public:
  virtual ~WeightQuantizer() = default;
  /// `previous` is the last result for the same tensor, if any (warm start).
  virtual QuantResult quantize(const Tensor& w, const QuantResult* previous) const = 0;
  virtual int bits() const = 0;
};

/// Projection quantizer for n >= 2, sign binarization for n = 1. Warm-starts
/// from the previous scale(s).
class PpqQuantizer final : public WeightQuantizer {
 public:
  explicit PpqQuantizer(QuantSpec spec) : spec_(spec) { spec_.validate(); }

  QuantResult quantize(const Tensor& w, const QuantResult* previous) const override {
    if (spec_.bits == 1) {
      if (spec_.granularity == Granularity::per_channel) return ppq_per_channel(w, spec_);
      return binarize(w, spec_.scaled_binary);
    }
    const bool warm = previous && !previous->degenerate && previous->shape == w.shape() && previous->bits == spec_.bits;
    if (spec_.granularity == Granularity::per_channel) {
      if (warm && previous->gamma.size() == w.dim(0)) return ppq_per_channel(w, spec_, previous->gamma);
      return ppq_per_channel(w, spec_);
    }
    if (warm && previous->gamma.size() == 1) return ppq(w, spec_, previous->gamma[0]);
    return ppq(w, spec_);
  }

  int bits() const override { return spec_.bits; }
  const QuantSpec& spec() const noexcept { return spec_; }

 private:
  QuantSpec spec_;
};

/// Unit-scale rounding to the nearest integer code.
class RoundQuantizer final : public WeightQuantizer {
 public:
  explicit RoundQuantizer(int bits = 8) : bits_(bits) {
    if (bits < 2 || bits > kMaxBits) throw SpecError("round quantizer needs 2..16 bits");
  }

  QuantResult quantize(const Tensor& w, const QuantResult*) const override {
    QuantResult r;
    r.shape = w.shape();
    r.bits = bits_;
    r.q.resize(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) r.q[i] = quantize_code(w[i], 1.0, bits_);
    r.gamma = {1.0f};
    r.iterations = 1;
    r.degenerate_channels = {0};
    return r;
  }

  int bits() const override { return bits_; }

 private:
  int bits_;
};

}  // namespace abq
