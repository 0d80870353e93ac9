#pragma once

// Plain loop kernels shared by the float graph ops and the integer inference
// path. All reductions run in a fixed sequential order so results are
// reproducible bit for bit.

#include <abq/tensor.hpp>

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace abq::kernels {

struct ConvDims {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t out_h, out_w;
  std::size_t stride, padding;
};

inline ConvDims conv_dims(const Shape& input, const Shape& kernel, std::size_t stride, std::size_t padding) {
  if (input.size() != 4 || kernel.size() != 4) {
    throw DimensionError("conv2d expects NxCxHxW input and OxCxkhxkw kernel, got " + shape_str(input) +
                         " and " + shape_str(kernel));
  }
  if (input[1] != kernel[1]) {
    throw DimensionError("conv2d channel mismatch: input " + shape_str(input) + " kernel " + shape_str(kernel));
  }
  if (stride == 0) throw DimensionError("conv2d stride must be positive");
  ConvDims d{input[0], input[1], input[2], input[3], kernel[0], kernel[2], kernel[3], 0, 0, stride, padding};
  if (d.kernel_h > d.height + 2 * padding || d.kernel_w > d.width + 2 * padding) {
    throw DimensionError("conv2d kernel " + shape_str(kernel) + " larger than padded input " + shape_str(input));
  }
  d.out_h = (d.height + 2 * padding - d.kernel_h) / stride + 1;
  d.out_w = (d.width + 2 * padding - d.kernel_w) / stride + 1;
  return d;
}

/// Patch matrix of one sample: row r = (ky * kw + kx) * C + c, column p =
/// oy * out_w + ox. Taps that fall into the padding are zero.
template <typename T>
std::vector<T> im2col(std::span<const T> x, const ConvDims& d) {
  const std::size_t P = d.out_h * d.out_w;
  const std::size_t plane = d.height * d.width;
  std::vector<T> cols(d.kernel_h * d.kernel_w * d.channels * P, T{});
  for (std::size_t ky = 0; ky < d.kernel_h; ++ky)
    for (std::size_t kx = 0; kx < d.kernel_w; ++kx)
      for (std::size_t c = 0; c < d.channels; ++c) {
        T* row = cols.data() + ((ky * d.kernel_w + kx) * d.channels + c) * P;
        for (std::size_t oy = 0; oy < d.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - static_cast<std::ptrdiff_t>(d.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.height)) continue;
          for (std::size_t ox = 0; ox < d.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) - static_cast<std::ptrdiff_t>(d.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.width)) continue;
            row[oy * d.out_w + ox] = x[c * plane + static_cast<std::size_t>(iy) * d.width + static_cast<std::size_t>(ix)];
          }
        }
      }
  return cols;
}

/// Kernel O x C x kh x kw reordered to O x (kh * kw * C), matching im2col rows.
template <typename T>
std::vector<T> kernel_rows(std::span<const T> k, const ConvDims& d) {
  const std::size_t R = d.kernel_h * d.kernel_w * d.channels;
  std::vector<T> out(d.out_channels * R);
  for (std::size_t o = 0; o < d.out_channels; ++o)
    for (std::size_t c = 0; c < d.channels; ++c)
      for (std::size_t ky = 0; ky < d.kernel_h; ++ky)
        for (std::size_t kx = 0; kx < d.kernel_w; ++kx)
          out[o * R + (ky * d.kernel_w + kx) * d.channels + c] =
              k[((o * d.channels + c) * d.kernel_h + ky) * d.kernel_w + kx];
  return out;
}

/// Cross-correlation. Each output sums kernel rows, then kernel columns, then
/// input channels (innermost); padded taps contribute exact zeros. Acc is the
/// accumulator and output element type.
template <typename Acc, typename In, typename Ker>
BasicTensor<Acc> conv2d_accumulate(const BasicTensor<In>& input, const BasicTensor<Ker>& kernel, std::size_t stride,
                                   std::size_t padding) {
  const ConvDims d = conv_dims(input.shape(), kernel.shape(), stride, padding);
  BasicTensor<Acc> out(Shape{d.batch, d.out_channels, d.out_h, d.out_w});
  const std::size_t P = d.out_h * d.out_w;
  const std::size_t R = d.kernel_h * d.kernel_w * d.channels;
  const std::size_t sample = d.channels * d.height * d.width;
  const auto kr = kernel_rows<Ker>(kernel.data(), d);
  auto y = out.data();
  for (std::size_t n = 0; n < d.batch; ++n) {
    const auto cols = im2col<In>(input.data().subspan(n * sample, sample), d);
    for (std::size_t o = 0; o < d.out_channels; ++o) {
      Acc* yr = y.data() + (n * d.out_channels + o) * P;
      for (std::size_t r = 0; r < R; ++r) {
        const Acc kv = static_cast<Acc>(kr[o * R + r]);
        const In* cr = cols.data() + r * P;
        for (std::size_t p = 0; p < P; ++p) yr[p] += kv * static_cast<Acc>(cr[p]);
      }
    }
  }
  return out;
}

/// a[m x k] * b[k x n], every output summed in increasing k.
template <typename Acc, typename A, typename B>
BasicTensor<Acc> gemm_accumulate(const BasicTensor<A>& a, const BasicTensor<B>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), kk = a.dim(1), n = b.dim(1);
  BasicTensor<Acc> out(Shape{m, n});
  const auto av = a.data();
  const auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    Acc* orow = ov.data() + i * n;
    for (std::size_t p = 0; p < kk; ++p) {
      const Acc s = static_cast<Acc>(av[i * kk + p]);
      const B* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += s * static_cast<Acc>(brow[j]);
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> transpose2d(const BasicTensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  BasicTensor<T> t(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  return t;
}

/// y[n,o] = sum_i x[n,i] * w[o,i], summed in increasing i (bias is added
/// after the sum by the caller).
template <typename Acc, typename X, typename W>
BasicTensor<Acc> linear_accumulate(const BasicTensor<X>& x, const BasicTensor<W>& w) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw DimensionError("linear shape mismatch: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  }
  return gemm_accumulate<Acc>(x, transpose2d(w));
}

/// Adds bias[c] to every element of channel c (axis 1).
inline void add_channel_bias(Tensor& y, const Tensor& bias) {
  if (y.rank() < 2 || bias.size() != y.dim(1)) {
    throw DimensionError("bias of shape " + shape_str(bias.shape()) + " does not fit " + shape_str(y.shape()));
  }
  const std::size_t channels = y.dim(1);
  const std::size_t inner = y.size() / (y.dim(0) * channels);
  float* p = y.data().data();
  for (std::size_t n = 0; n < y.dim(0); ++n)
    for (std::size_t c = 0; c < channels; ++c, p += inner) {
      const float b = bias[c];
      for (std::size_t i = 0; i < inner; ++i) p[i] += b;
    }
}

inline Tensor channel_bias_grad(const Tensor& g, std::size_t channels) {
  Tensor gb(Shape{channels});
  const std::size_t inner = g.size() / (g.dim(0) * channels);
  const float* p = g.data().data();
  for (std::size_t n = 0; n < g.dim(0); ++n)
    for (std::size_t c = 0; c < channels; ++c, p += inner)
      for (std::size_t i = 0; i < inner; ++i) gb[c] += p[i];
  return gb;
}

/// Scatter-adds a patch-matrix gradient back onto one input sample.
inline void col2im_add(std::span<const float> cols, std::span<float> gx, const ConvDims& d) {
  const std::size_t P = d.out_h * d.out_w;
  const std::size_t plane = d.height * d.width;
  for (std::size_t ky = 0; ky < d.kernel_h; ++ky)
    for (std::size_t kx = 0; kx < d.kernel_w; ++kx)
      for (std::size_t c = 0; c < d.channels; ++c) {
        const float* row = cols.data() + ((ky * d.kernel_w + kx) * d.channels + c) * P;
        for (std::size_t oy = 0; oy < d.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - static_cast<std::ptrdiff_t>(d.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.height)) continue;
          for (std::size_t ox = 0; ox < d.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) - static_cast<std::ptrdiff_t>(d.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.width)) continue;
            gx[c * plane + static_cast<std::size_t>(iy) * d.width + static_cast<std::size_t>(ix)] += row[oy * d.out_w + ox];
          }
        }
      }
}

inline Tensor conv2d_backward_input(const Tensor& grad, const Tensor& kernel, const Shape& input_shape,
                                    std::size_t stride, std::size_t padding) {
  const ConvDims d = conv_dims(input_shape, kernel.shape(), stride, padding);
  Tensor gx(input_shape);
  const std::size_t P = d.out_h * d.out_w;
  const std::size_t R = d.kernel_h * d.kernel_w * d.channels;
  const std::size_t sample = d.channels * d.height * d.width;
  const auto kr = kernel_rows<float>(kernel.data(), d);
  std::vector<float> dcols(R * P);
  for (std::size_t n = 0; n < d.batch; ++n) {
    std::fill(dcols.begin(), dcols.end(), 0.0f);
    for (std::size_t o = 0; o < d.out_channels; ++o) {
      const float* g = grad.data().data() + (n * d.out_channels + o) * P;
      for (std::size_t r = 0; r < R; ++r) {
        const float kv = kr[o * R + r];
        float* dr = dcols.data() + r * P;
        for (std::size_t p = 0; p < P; ++p) dr[p] += kv * g[p];
      }
    }
    col2im_add(dcols, gx.data().subspan(n * sample, sample), d);
  }
  return gx;
}

inline Tensor conv2d_backward_kernel(const Tensor& grad, const Tensor& input, const Shape& kernel_shape,
                                     std::size_t stride, std::size_t padding) {
  const ConvDims d = conv_dims(input.shape(), kernel_shape, stride, padding);
  const std::size_t P = d.out_h * d.out_w;
  const std::size_t R = d.kernel_h * d.kernel_w * d.channels;
  const std::size_t sample = d.channels * d.height * d.width;
  std::vector<float> gr(d.out_channels * R, 0.0f);  // O x R, im2col row order
  std::vector<float> colsT(P * R);
  for (std::size_t n = 0; n < d.batch; ++n) {
    const auto cols = im2col<float>(input.data().subspan(n * sample, sample), d);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t p = 0; p < P; ++p) colsT[p * R + r] = cols[r * P + p];
    for (std::size_t o = 0; o < d.out_channels; ++o) {
      const float* g = grad.data().data() + (n * d.out_channels + o) * P;
      float* go = gr.data() + o * R;
      for (std::size_t p = 0; p < P; ++p) {
        const float gv = g[p];
        const float* ct = colsT.data() + p * R;
        for (std::size_t r = 0; r < R; ++r) go[r] += gv * ct[r];
      }
    }
  }
  Tensor gk(kernel_shape);
  for (std::size_t o = 0; o < d.out_channels; ++o)
    for (std::size_t c = 0; c < d.channels; ++c)
      for (std::size_t ky = 0; ky < d.kernel_h; ++ky)
        for (std::size_t kx = 0; kx < d.kernel_w; ++kx)
          gk[((o * d.channels + c) * d.kernel_h + ky) * d.kernel_w + kx] =
              gr[o * R + (ky * d.kernel_w + kx) * d.channels + c];
  return gk;
}

/// Non-overlapping k x k max pooling (window = stride = k, trailing rows and
/// columns that don't fill a window are dropped). `argmax`, when given,
/// receives the flat input index chosen for each output; ties keep the first
/// element in row-major window order.
inline Tensor max_pool2d(const Tensor& x, std::size_t k, std::vector<std::size_t>* argmax = nullptr) {
  if (x.rank() != 4) throw DimensionError("max_pool2d expects N x C x H x W, got " + shape_str(x.shape()));
  if (k == 0 || k > x.dim(2) || k > x.dim(3)) throw DimensionError("max_pool2d window does not fit the input");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = h / k, ow = w / k;
  Tensor y(Shape{x.dim(0), x.dim(1), oh, ow});
  if (argmax) argmax->assign(y.size(), 0);
  std::size_t oi = 0;
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox, ++oi) {
        std::size_t best = pl * h * w + oy * k * w + ox * k;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t i = pl * h * w + (oy * k + dy) * w + ox * k + dx;
            if (x[i] > x[best]) best = i;
          }
        y[oi] = x[best];
        if (argmax) (*argmax)[oi] = best;
      }
  return y;
}

}  // namespace abq::kernels
