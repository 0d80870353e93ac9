#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace abq;
using abq::testing::central_difference;
using abq::testing::random_tensor;
using abq::testing::relative_error;
using abq::testing::to_double;

namespace {

constexpr double kTolerance = 1e-4;

void expect_gradient_matches(const Tensor& analytic, const std::vector<double>& numeric, const char* what) {
  ASSERT_EQ(analytic.size(), numeric.size()) << what;
  for (std::size_t i = 0; i < numeric.size(); ++i)
    EXPECT_LT(relative_error(analytic[i], numeric[i]), kTolerance)
        << what << "[" << i << "] analytic " << analytic[i] << " numeric " << numeric[i];
}

/// sum(c * y) for a fixed random weighting c, so every output element matters.
double weighted_sum(const std::vector<double>& y, const Tensor& c) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * c[i];
  return s;
}

Var weighted_sum(const Var& y, const Tensor& c) { return sum(mul(y, Var::constant(c))); }

}  // namespace

TEST(Backward, SumGivesOnes) {
  Var w = Var::parameter(Tensor(Shape{2, 3}, 0.7f));
  backward(sum(w));
  EXPECT_EQ(w.grad()->vec(), std::vector<float>(6, 1.0f));
}

TEST(Backward, ToyQuadratic) {
  Var w = Var::parameter(Tensor::scalar(2.0f));
  backward(square(add_scalar(w, -5.7f)));
  EXPECT_NEAR((*w.grad())[0], -7.4f, 1e-6);
}

TEST(Backward, SecondCallOnSameGraphIsAStateError) {
  Var w = Var::parameter(Tensor::scalar(1.0f));
  Var loss = square(w);
  backward(loss);
  EXPECT_THROW(backward(loss), StateError);
}

TEST(Backward, NeedsScalarLoss) {
  Var w = Var::parameter(Tensor(Shape{2}, 1.0f));
  EXPECT_THROW(backward(square(w)), DimensionError);
}

TEST(Backward, FanOutAccumulates) {
  Var x = Var::parameter(Tensor(Shape{3}, std::vector<float>{1, -2, 0.5f}));
  Var loss = add(sum(mul(x, x)), sum(scale(x, 3.0f)));
  backward(loss);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_FLOAT_EQ((*x.grad())[i], 2.0f * x.value()[i] + 3.0f);
}

TEST(Backward, LeafGradientsAddAcrossPassesUntilReset) {
  Var w = Var::parameter(Tensor::scalar(1.0f));
  backward(scale(w, 2.0f));
  backward(scale(w, 3.0f));
  EXPECT_EQ((*w.grad())[0], 5.0f);
  w.zero_grad();
  EXPECT_EQ(w.grad(), nullptr);
}

TEST(Backward, ConstantsGetNoGradient) {
  Var c = Var::constant(Tensor::scalar(4.0f));
  Var w = Var::parameter(Tensor::scalar(1.0f));
  backward(sum(mul(c, w)));
  EXPECT_EQ(c.grad(), nullptr);
  EXPECT_EQ((*w.grad())[0], 4.0f);
}

TEST(Matmul, BackwardHandExample) {
  Var a = Var::parameter(Tensor(Shape{2, 2}, std::vector<float>{1, 2, 3, 4}));
  Var b = Var::parameter(Tensor(Shape{2, 1}, std::vector<float>{5, 6}));
  backward(sum(matmul(a, b)));  // upstream gradient of ones
  EXPECT_EQ(b.grad()->vec(), (std::vector<float>{4, 6}));
  EXPECT_EQ(a.grad()->vec(), (std::vector<float>{5, 6, 5, 6}));
}

TEST(FiniteDifference, Matmul) {
  std::mt19937_64 rng(21);
  const Tensor a = random_tensor(Shape{3, 4}, rng), b = random_tensor(Shape{4, 2}, rng);
  const Tensor c = random_tensor(Shape{3, 2}, rng);
  Var va = Var::parameter(a), vb = Var::parameter(b);
  backward(weighted_sum(matmul(va, vb), c));
  auto f = [&](const std::vector<double>& av, const std::vector<double>& bv) {
    std::vector<double> y(6, 0.0);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t k = 0; k < 4; ++k) y[i * 2 + j] += av[i * 4 + k] * bv[k * 2 + j];
    return weighted_sum(y, c);
  };
  const auto ad = to_double(a), bd = to_double(b);
  expect_gradient_matches(*va.grad(), central_difference([&](const auto& x) { return f(x, bd); }, ad), "a");
  expect_gradient_matches(*vb.grad(), central_difference([&](const auto& x) { return f(ad, x); }, bd), "b");
}

TEST(FiniteDifference, LinearWithBias) {
  std::mt19937_64 rng(22);
  const Tensor x = random_tensor(Shape{3, 5}, rng), w = random_tensor(Shape{4, 5}, rng), b = random_tensor(Shape{4}, rng);
  const Tensor c = random_tensor(Shape{3, 4}, rng);
  Var vx = Var::parameter(x), vw = Var::parameter(w), vb = Var::parameter(b);
  backward(weighted_sum(linear(vx, vw, vb), c));
  auto f = [&](const std::vector<double>& xv, const std::vector<double>& wv, const std::vector<double>& bv) {
    std::vector<double> y(12);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t o = 0; o < 4; ++o) {
        double s = bv[o];
        for (std::size_t i = 0; i < 5; ++i) s += xv[r * 5 + i] * wv[o * 5 + i];
        y[r * 4 + o] = s;
      }
    return weighted_sum(y, c);
  };
  const auto xd = to_double(x), wd = to_double(w), bd = to_double(b);
  expect_gradient_matches(*vx.grad(), central_difference([&](const auto& v) { return f(v, wd, bd); }, xd), "x");
  expect_gradient_matches(*vw.grad(), central_difference([&](const auto& v) { return f(xd, v, bd); }, wd), "w");
  expect_gradient_matches(*vb.grad(), central_difference([&](const auto& v) { return f(xd, wd, v); }, bd), "b");
}

TEST(FiniteDifference, Conv2dInputKernelBias) {
  std::mt19937_64 rng(23);
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}, {2, 2}}) {
    const Tensor x = random_tensor(Shape{2, 2, 5, 4}, rng), k = random_tensor(Shape{3, 2, 3, 3}, rng);
    const Tensor b = random_tensor(Shape{3}, rng);
    Var vx = Var::parameter(x), vk = Var::parameter(k), vb = Var::parameter(b);
    Var y = conv2d(vx, vk, vb, stride, pad);
    const Tensor c = random_tensor(y.shape(), rng);
    backward(weighted_sum(y, c));
    auto f = [&](const std::vector<double>& xv, const std::vector<double>& kv, const std::vector<double>& bv) {
      std::vector<double> out;
      {
        const std::size_t n = 2, ci = 2, h = 5, w = 4, o = 3, kh = 3, kw = 3;
        const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
        out.assign(n * o * oh * ow, 0.0);
        for (std::size_t bb = 0; bb < n; ++bb)
          for (std::size_t oc = 0; oc < o; ++oc)
            for (std::size_t oy = 0; oy < oh; ++oy)
              for (std::size_t ox = 0; ox < ow; ++ox) {
                double acc = bv[oc];
                for (std::size_t ky = 0; ky < kh; ++ky)
                  for (std::size_t kx = 0; kx < kw; ++kx)
                    for (std::size_t cc = 0; cc < ci; ++cc) {
                      const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                      const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                      if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                      acc += xv[((bb * ci + cc) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] *
                             kv[((oc * ci + cc) * kh + ky) * kw + kx];
                    }
                out[((bb * o + oc) * oh + oy) * ow + ox] = acc;
              }
      }
      return weighted_sum(out, c);
    };
    const auto xd = to_double(x), kd = to_double(k), bd = to_double(b);
    expect_gradient_matches(*vx.grad(), central_difference([&](const auto& v) { return f(v, kd, bd); }, xd), "x");
    expect_gradient_matches(*vk.grad(), central_difference([&](const auto& v) { return f(xd, v, bd); }, kd), "kernel");
    expect_gradient_matches(*vb.grad(), central_difference([&](const auto& v) { return f(xd, kd, v); }, bd), "bias");
  }
}

TEST(FiniteDifference, ReluAndHardtanhAwayFromKinks) {
  // Values kept at least 0.05 from the kinks at -1, 0 and 1.
  Tensor x(Shape{6}, std::vector<float>{-1.7f, -0.6f, -0.2f, 0.3f, 0.8f, 1.4f});
  std::mt19937_64 rng(24);
  const Tensor c = random_tensor(x.shape(), rng);
  for (int which = 0; which < 2; ++which) {
    Var v = Var::parameter(x);
    backward(weighted_sum(which == 0 ? relu(v) : hardtanh(v), c));
    auto f = [&](const std::vector<double>& xv) {
      std::vector<double> y(xv.size());
      for (std::size_t i = 0; i < xv.size(); ++i) y[i] = which == 0 ? std::max(xv[i], 0.0) : std::clamp(xv[i], -1.0, 1.0);
      return weighted_sum(y, c);
    };
    expect_gradient_matches(*v.grad(), central_difference(f, to_double(x)), which == 0 ? "relu" : "hardtanh");
  }
}

TEST(FiniteDifference, MaxPool) {
  // Distinct values 0.1 apart so a 1e-3 step never changes the winner.
  std::vector<float> vals(2 * 4 * 4);
  std::iota(vals.begin(), vals.end(), 0.0f);
  std::mt19937_64 rng(25);
  std::shuffle(vals.begin(), vals.end(), rng);
  for (auto& v : vals) v *= 0.1f;
  const Tensor x(Shape{1, 2, 4, 4}, vals);
  Var vx = Var::parameter(x);
  Var y = max_pool2d(vx, 2);
  const Tensor c = random_tensor(y.shape(), rng);
  backward(weighted_sum(y, c));
  auto f = [&](const std::vector<double>& xv) {
    std::vector<double> out;
    for (std::size_t p = 0; p < 2; ++p)
      for (std::size_t oy = 0; oy < 2; ++oy)
        for (std::size_t ox = 0; ox < 2; ++ox) {
          double m = -1e300;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) m = std::max(m, xv[p * 16 + (oy * 2 + dy) * 4 + ox * 2 + dx]);
          out.push_back(m);
        }
    return weighted_sum(out, c);
  };
  expect_gradient_matches(*vx.grad(), central_difference(f, to_double(x)), "max_pool");
}

TEST(FiniteDifference, SoftmaxCrossEntropy) {
  std::mt19937_64 rng(26);
  const Tensor z = random_tensor(Shape{4, 5}, rng, -2.0f, 2.0f);
  const std::vector<int> labels{0, 3, 4, 1};
  Var vz = Var::parameter(z);
  backward(softmax_cross_entropy(vz, labels));
  auto f = [&](const std::vector<double>& zv) {
    double total = 0.0;
    for (std::size_t r = 0; r < 4; ++r) {
      double denom = 0.0;
      for (std::size_t j = 0; j < 5; ++j) denom += std::exp(zv[r * 5 + j]);
      total += std::log(denom) - zv[r * 5 + static_cast<std::size_t>(labels[r])];
    }
    return total / 4.0;
  };
  expect_gradient_matches(*vz.grad(), central_difference(f, to_double(z)), "logits");
}

TEST(FiniteDifference, ComposedDenseNetwork) {
  std::mt19937_64 rng(27);
  const Tensor x = random_tensor(Shape{3, 4}, rng);
  const Tensor w1 = random_tensor(Shape{5, 4}, rng), b1 = random_tensor(Shape{5}, rng);
  const Tensor w2 = random_tensor(Shape{3, 5}, rng), b2 = random_tensor(Shape{3}, rng);
  const std::vector<int> labels{2, 0, 1};
  Var vw1 = Var::parameter(w1), vb1 = Var::parameter(b1), vw2 = Var::parameter(w2), vb2 = Var::parameter(b2);
  Var h = hardtanh(linear(Var::constant(x), vw1, vb1));
  backward(softmax_cross_entropy(linear(h, vw2, vb2), labels));

  auto loss = [&](const std::vector<double>& p1, const std::vector<double>& q1, const std::vector<double>& p2,
                  const std::vector<double>& q2) {
    double total = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
      double hid[5];
      for (std::size_t o = 0; o < 5; ++o) {
        double s = q1[o];
        for (std::size_t i = 0; i < 4; ++i) s += x[r * 4 + i] * p1[o * 4 + i];
        hid[o] = std::clamp(s, -1.0, 1.0);
      }
      double z[3], denom = 0.0;
      for (std::size_t o = 0; o < 3; ++o) {
        z[o] = q2[o];
        for (std::size_t i = 0; i < 5; ++i) z[o] += hid[i] * p2[o * 5 + i];
        denom += std::exp(z[o]);
      }
      total += std::log(denom) - z[labels[r]];
    }
    return total / 3.0;
  };
  const auto p1 = to_double(w1), q1 = to_double(b1), p2 = to_double(w2), q2 = to_double(b2);
  expect_gradient_matches(*vw1.grad(), central_difference([&](const auto& v) { return loss(v, q1, p2, q2); }, p1), "w1");
  expect_gradient_matches(*vb1.grad(), central_difference([&](const auto& v) { return loss(p1, v, p2, q2); }, q1), "b1");
  expect_gradient_matches(*vw2.grad(), central_difference([&](const auto& v) { return loss(p1, q1, v, q2); }, p2), "w2");
  expect_gradient_matches(*vb2.grad(), central_difference([&](const auto& v) { return loss(p1, q1, p2, v); }, q2), "b2");
}

TEST(Optimizer, PlainSgdStep) {
  Var w = Var::parameter(Tensor::scalar(2.0f));
  backward(square(add_scalar(w, -5.7f)));
  SgdOptimizer opt(0.1f);
  opt.step(w, 0.1f);
  EXPECT_FLOAT_EQ(w.value()[0], 2.0f + 0.74f);
}

TEST(Optimizer, MomentumAccumulatesVelocity) {
  Var w = Var::parameter(Tensor::scalar(0.0f));
  SgdOptimizer opt(1.0f, 0.5f);
  backward(scale(w, 1.0f));
  opt.step(w, 1.0f);  // v = 1, w = -1
  w.zero_grad();
  backward(scale(w, 1.0f));
  opt.step(w, 1.0f);  // v = 1.5, w = -2.5
  EXPECT_EQ(w.value()[0], -2.5f);
  EXPECT_EQ((*opt.velocity(w))[0], 1.5f);
}

TEST(Optimizer, RejectsBadHyperparameters) {
  EXPECT_THROW(SgdOptimizer(0.0f), ConfigError);
  EXPECT_THROW(SgdOptimizer(0.1f, 1.0f), ConfigError);
}
