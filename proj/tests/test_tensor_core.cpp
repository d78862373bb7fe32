#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "azgan/errors.hpp"
#include "azgan/gradcheck.hpp"
#include "azgan/ops.hpp"
#include "azgan/optimizer.hpp"
#include "azgan/random.hpp"

#include <cmath>

using namespace azgan;

namespace {

// Direct quadruple-sum convolution, written without the tape or im2col.
Tensor conv_oracle(const Tensor& x, const Tensor& k, const Tensor* b, Index stride, Index pad) {
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index O = k.dim(0), KH = k.dim(2), KW = k.dim(3);
  const Index HO = (H + 2 * pad - KH) / stride + 1, WO = (W + 2 * pad - KW) / stride + 1;
  Tensor y({B, O, HO, WO});
  for (Index n = 0; n < B; ++n)
    for (Index o = 0; o < O; ++o)
      for (Index oy = 0; oy < HO; ++oy)
        for (Index ox = 0; ox < WO; ++ox) {
          double s = b ? (*b)[o] : 0.0;
          for (Index c = 0; c < C; ++c)
            for (Index i = 0; i < KH; ++i)
              for (Index j = 0; j < KW; ++j) {
                const Index yy = oy * stride - pad + i, xx = ox * stride - pad + j;
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                s += x[((n * C + c) * H + yy) * W + xx] * k[((o * C + c) * KH + i) * KW + j];
              }
          y[((n * O + o) * HO + oy) * WO + ox] = s;
        }
  return y;
}

double bilinear_oracle(const Tensor& x, Index n, Index c, double y, double xx) {
  const Index C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto px = [&](long r, long q) {
    if (r < 0 || r >= H || q < 0 || q >= W) return 0.0;
    return x[((n * C + c) * H + r) * W + q];
  };
  const long y0 = static_cast<long>(std::floor(y)), x0 = static_cast<long>(std::floor(xx));
  const double ly = y - y0, lx = xx - x0;
  return (1 - ly) * (1 - lx) * px(y0, x0) + (1 - ly) * lx * px(y0, x0 + 1) +
         ly * (1 - lx) * px(y0 + 1, x0) + ly * lx * px(y0 + 1, x0 + 1);
}

Tensor deform_oracle(const Tensor& x, const Tensor& k, const Tensor& off, Index stride, Index pad) {
  const Index B = x.dim(0), C = x.dim(1);
  const Index O = k.dim(0), KH = k.dim(2), KW = k.dim(3);
  const Index HO = off.dim(2), WO = off.dim(3);
  Tensor y({B, O, HO, WO});
  for (Index n = 0; n < B; ++n)
    for (Index o = 0; o < O; ++o)
      for (Index oy = 0; oy < HO; ++oy)
        for (Index ox = 0; ox < WO; ++ox) {
          double s = 0.0;
          for (Index i = 0; i < KH; ++i)
            for (Index j = 0; j < KW; ++j) {
              const Index t = i * KW + j;
              const double dy = off[((n * 2 * KH * KW + 2 * t) * HO + oy) * WO + ox];
              const double dx = off[((n * 2 * KH * KW + 2 * t + 1) * HO + oy) * WO + ox];
              for (Index c = 0; c < C; ++c) {
                s += k[((o * C + c) * KH + i) * KW + j] *
                     bilinear_oracle(x, n, c, oy * stride - pad + i + dy, ox * stride - pad + j + dx);
              }
            }
          y[((n * O + o) * HO + oy) * WO + ox] = s;
        }
  return y;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  return (a.values() - b.values()).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("conv2d identity kernel returns the input") {
  Tape tape;
  Tensor x = Tensor::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor k = Tensor::from({1, 1, 1, 1}, {1});
  Tensor b = Tensor::from({1}, {0});
  Tensor y = conv2d(tape, x, k, b);
  CHECK(y.shape() == x.shape());
  CHECK(y.values() == x.values());
}

TEST_CASE("conv2d diagonal kernel on 2x2") {
  Tape tape;
  Tensor y = conv2d(tape, Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}),
                    Tensor::from({1, 1, 2, 2}, {1, 0, 0, 1}), Tensor::from({1}, {0}));
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == 5.0);
}

TEST_CASE("conv2d output extent and shape errors") {
  Tape tape;
  Rng rng(1);
  Tensor x = uniform_tensor({2, 3, 7, 6}, -1, 1, rng);
  Tensor k = uniform_tensor({4, 3, 3, 2}, -1, 1, rng);
  Tensor b = uniform_tensor({4}, -1, 1, rng);
  Tensor y = conv2d(tape, x, k, b, {2, 1});
  CHECK(y.shape() == Shape{2, 4, 4, 4});
  Tensor bad = uniform_tensor({4, 2, 3, 3}, -1, 1, rng);
  CHECK_THROWS_AS(conv2d(tape, x, bad, b), ShapeError);
  try {
    conv2d(tape, x, bad, b);
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3,7,6]") != std::string::npos);
    CHECK(msg.find("[4,2,3,3]") != std::string::npos);
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(2);
  Tensor k = uniform_tensor({2, 1, 2, 2}, -1, 1, rng);
  Tensor b = uniform_tensor({2}, -1, 1, rng);
  Tensor x = uniform_tensor({1, 1, 4, 4}, -1, 1, rng);
  CHECK(finite_difference_check([&](Tape& t, const Tensor& v) { return sum(t, conv2d(t, v, k, b)); }, x) < 1e-4);
  CHECK(finite_difference_check([&](Tape& t, const Tensor& v) { return sum(t, conv2d(t, x, v, b)); }, k) < 1e-4);
}

TEST_CASE("deformable_conv2d with zero offsets is bit-identical to conv2d") {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    Tape tape;
    Tensor x = uniform_tensor({2, 3, 6, 5}, -1, 1, rng);
    Tensor k = uniform_tensor({4, 3, 3, 3}, -1, 1, rng);
    const Index stride = 1 + trial % 2;
    const Conv2dOptions opt{stride, 1};
    Tensor zero_bias({4});
    Tensor plain = conv2d(tape, x, k, zero_bias, opt);
    Tensor off({2, 18, plain.dim(2), plain.dim(3)});
    Tensor deform = deformable_conv2d(tape, x, k, off, opt);
    CHECK(plain.values() == deform.values());
  }
}

TEST_CASE("deformable_conv2d half-pixel offset blends four neighbours") {
  Tape tape;
  Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor k = Tensor::from({1, 1, 1, 1}, {1});
  Tensor off({1, 2, 2, 2});
  off[0] = 0.5;  // row displacement at (0,0)
  off[4] = 0.5;  // column displacement at (0,0)
  Tensor y = deformable_conv2d(tape, x, k, off);
  CHECK(y[0] == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(y[1] == 2.0);
  CHECK(y[3] == 4.0);
}

TEST_CASE("deformable_conv2d rejects bad offset channels") {
  Tape tape;
  Tensor x({1, 1, 4, 4});
  Tensor k({1, 1, 3, 3});
  CHECK_THROWS_AS(deformable_conv2d(tape, x, k, Tensor({1, 9, 2, 2})), ShapeError);
  CHECK_THROWS_AS(deformable_conv2d(tape, x, k, Tensor({1, 18, 3, 3})), ShapeError);
}

TEST_CASE("deformable_conv2d offset gradients at interior sampling points") {
  Rng rng(4);
  Tensor x = uniform_tensor({1, 2, 4, 4}, -1, 1, rng);
  Tensor k = uniform_tensor({2, 2, 3, 3}, -1, 1, rng);
  Tensor off = uniform_tensor({1, 18, 4, 4}, 0.2, 0.8, rng);
  Tensor r = uniform_tensor({1, 2, 4, 4}, -1, 1, rng);
  auto f = [&](Tape& t, const Tensor& v) { return sum(t, mul(t, deformable_conv2d(t, x, k, v, {1, 1}), r)); };
  CHECK(finite_difference_check(f, off) < 1e-4);
}

TEST_CASE("forward values equal direct re-implementations on random inputs") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tape tape;
    Tensor x = uniform_tensor({2, 2, 7, 7}, -1, 1, rng);
    Tensor k = uniform_tensor({3, 2, 3, 3}, -1, 1, rng);
    Tensor b = uniform_tensor({3}, -1, 1, rng);
    const Index stride = 1 + trial % 2;
    const Index pad = trial % 3 == 0 ? 0 : 1;
    CHECK(max_abs_diff(conv2d(tape, x, k, b, {stride, pad}), conv_oracle(x, k, &b, stride, pad)) < 1e-10);
    const Index ho = conv_out_extent(7, 3, stride, pad);
    Tensor off = uniform_tensor({2, 18, ho, ho}, -1.5, 1.5, rng);
    CHECK(max_abs_diff(deformable_conv2d(tape, x, k, off, {stride, pad}), deform_oracle(x, k, off, stride, pad)) <
          1e-10);
  }
}

TEST_CASE("batch_norm centres and scales in train mode") {
  Rng rng(6);
  Tape tape;
  Tensor x = uniform_tensor({4, 2, 3, 3}, 4, 6, rng);
  BatchNormStats stats(2);
  Tensor y = batch_norm(tape, x, Tensor({2}, 1.0), Tensor({2}, 0.0), stats, Mode::kTrain);
  for (Index c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (Index n = 0; n < 4; ++n)
      for (Index i = 0; i < 9; ++i) m += y[(n * 2 + c) * 9 + i];
    m /= 36;
    for (Index n = 0; n < 4; ++n)
      for (Index i = 0; i < 9; ++i) v += std::pow(y[(n * 2 + c) * 9 + i] - m, 2);
    CHECK(std::abs(m) < 1e-6);
    CHECK(v / 36 == doctest::Approx(1.0).epsilon(1e-3));
  }
  // running stats moved towards the batch mean (about 5)
  CHECK(stats.mean[0] == doctest::Approx(0.1 * 5).epsilon(0.05));
}

TEST_CASE("batch_norm affine identity gamma=2 beta=3") {
  Rng rng(7);
  Tape tape;
  Tensor x = uniform_tensor({3, 1, 4, 4}, -1, 1, rng);
  BatchNormStats stats(1);
  Tensor y = batch_norm(tape, x, Tensor({1}, 2.0), Tensor({1}, 3.0), stats, Mode::kTrain);
  const double m = y.values().mean();
  const double sd = std::sqrt((y.values().array() - m).square().mean());
  CHECK(m == doctest::Approx(3.0).epsilon(1e-9));
  CHECK(sd == doctest::Approx(2.0).epsilon(1e-3));
}

TEST_CASE("batch_norm eval uses stored statistics and rejects degenerate batches") {
  Tape tape;
  BatchNormStats stats(1);
  stats.mean[0] = 1.0;
  stats.var[0] = 4.0 - 1e-5;
  Tensor y = batch_norm(tape, Tensor::from({1, 1, 1, 2}, {3, 5}), Tensor({1}, 1.0), Tensor({1}, 0.0), stats,
                        Mode::kEval);
  CHECK(y[0] == doctest::Approx(1.0));
  CHECK(y[1] == doctest::Approx(2.0));
  CHECK_THROWS_AS(batch_norm(tape, Tensor({1, 1, 1, 1}), Tensor({1}, 1.0), Tensor({1}, 0.0), stats, Mode::kTrain),
                  DegenerateBatchError);
}

TEST_CASE("batch_norm gradient on 2x2x2x2 input") {
  Rng rng(8);
  Tensor x = uniform_tensor({2, 2, 2, 2}, -1, 1, rng);
  Tensor r = uniform_tensor({2, 2, 2, 2}, -1, 1, rng);
  Tensor g = Tensor::from({2}, {1.3, 0.7});
  Tensor b = Tensor::from({2}, {0.1, -0.4});
  auto f = [&](Tape& t, const Tensor& v) {
    BatchNormStats s(2);
    return sum(t, mul(t, batch_norm(t, v, g, b, s, Mode::kTrain), r));
  };
  CHECK(finite_difference_check(f, x) < 1e-4);
}

TEST_CASE("lrelu definition, identity case and slopes") {
  Tape tape;
  Tensor x = Tensor::from({3}, {-1, 0, 2}, true);
  Tensor y = lrelu(tape, x, 0.2);
  CHECK(y[0] == doctest::Approx(-0.2));
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 2.0);
  Tensor id = lrelu(tape, x, 1.0);
  CHECK(id.values() == x.values());

  Tape t2;
  Tensor z = Tensor::from({2}, {-3, 0}, true);
  t2.backward(sum(t2, lrelu(t2, z, 0.2)));
  CHECK(z.grad()[0] == doctest::Approx(0.2));
  CHECK(z.grad()[1] == doctest::Approx(0.2));  // derivative at 0 is alpha
}

TEST_CASE("maxpool2d forward, tie routing and gradient") {
  Tape tape;
  Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}, true);
  Tensor y = maxpool2d(tape, x, 2, 2);
  CHECK(y[0] == 4.0);

  Tape t2;
  Tensor c({1, 1, 4, 4}, 7.0, true);
  Tensor yc = maxpool2d(t2, c, 2, 2);
  CHECK((yc.values().array() == 7.0).all());
  t2.backward(sum(t2, yc));
  // first cell of each window in row-major order
  for (Index i = 0; i < 16; ++i) {
    const bool first = (i / 4) % 2 == 0 && (i % 4) % 2 == 0;
    CHECK(c.grad()[i] == (first ? 1.0 : 0.0));
  }
  CHECK_THROWS_AS(maxpool2d(tape, x, 3, 1), ShapeError);

  Rng rng(9);
  Tensor r = uniform_tensor({1, 2, 2, 2}, -1, 1, rng);
  Tensor p = uniform_tensor({1, 2, 4, 4}, -1, 1, rng);
  CHECK(finite_difference_check([&](Tape& t, const Tensor& v) { return sum(t, mul(t, maxpool2d(t, v, 2, 2), r)); },
                                p) < 1e-4);
}

TEST_CASE("linear selector, annihilator and weight gradient") {
  Tape tape;
  Tensor x = Tensor::from({1, 3}, {1, 2, 3});
  Tensor w = Tensor::from({3}, {0, 0, 1}, true);
  Tensor y = linear(tape, x, w);
  CHECK(y.shape() == Shape{1, 1});
  CHECK(y[0] == 3.0);
  CHECK(linear(tape, x, Tensor({3}))[0] == 0.0);
  tape.backward(sum(tape, y));
  CHECK(w.grad() == x.values());
  CHECK_THROWS_AS(linear(tape, x, Tensor({4})), ShapeError);
}

TEST_CASE("residual_add zero branch, cancellation and gradient") {
  Tape tape;
  Tensor x = Tensor::from({2, 2}, {1, -2, 3, 0.5}, true);
  Tensor z({2, 2}, 0.0, true);
  CHECK(residual_add(tape, x, z).values() == x.values());
  Tensor negx = scale(tape, x.detach(), -1.0);
  CHECK((residual_add(tape, x, negx).values().array() == 0.0).all());
  Tape t2;
  t2.backward(sum(t2, residual_add(t2, x, z)));
  CHECK((x.grad().array() == 1.0).all());
  CHECK((z.grad().array() == 1.0).all());
  CHECK_THROWS_AS(residual_add(tape, x, Tensor({4})), ShapeError);
}

TEST_CASE("backward sum and chain rules") {
  Tensor x = Tensor::from({3}, {1, -2, 4}, true);
  {
    Tape tape;
    tape.backward(sum(tape, x));
    CHECK((x.grad().array() == 1.0).all());
  }
  x.zero_grad();
  {
    Tape tape;
    tape.backward(sum(tape, mul(tape, x, x)));
    CHECK(x.grad() == 2.0 * x.values());
  }
  Tape tape;
  CHECK_THROWS_AS(tape.backward(mul(tape, x, x)), ContractError);
}

TEST_CASE("gradient accumulation across uses and determinism of replay") {
  Rng rng(10);
  Tensor x = uniform_tensor({4}, -1, 1, rng, true);
  Tensor a = uniform_tensor({4}, -1, 1, rng);
  Tensor b = uniform_tensor({4}, -1, 1, rng);

  Tape ta;
  ta.backward(sum(ta, mul(ta, x, a)));
  const Eigen::VectorXd ga = x.grad();
  x.zero_grad();
  Tape tb;
  tb.backward(sum(tb, mul(tb, x, b)));
  const Eigen::VectorXd gb = x.grad();
  x.zero_grad();
  Tape both;
  Tensor loss = add(both, sum(both, mul(both, x, a)), sum(both, mul(both, x, b)));
  both.backward(loss);
  CHECK((x.grad() - (ga + gb)).cwiseAbs().maxCoeff() < 1e-15);

  const Eigen::VectorXd first = x.grad();
  x.zero_grad();
  both.backward(loss);
  CHECK(x.grad() == first);
}

TEST_CASE("composite conv-bn-lrelu-linear gradient") {
  Rng rng(11);
  Tensor k = uniform_tensor({2, 1, 3, 3}, -1, 1, rng);
  Tensor b = uniform_tensor({2}, -1, 1, rng);
  Tensor w = uniform_tensor({2 * 4 * 4}, -1, 1, rng);
  Tensor x = uniform_tensor({2, 1, 4, 4}, -1, 1, rng);
  auto f = [&](Tape& t, const Tensor& v) {
    BatchNormStats s(2);
    Tensor h = conv2d(t, v, k, b, {1, 1});
    h = batch_norm(t, h, Tensor({2}, 1.0), Tensor({2}, 0.0), s, Mode::kTrain);
    h = lrelu(t, h, 0.2);
    return sum(t, linear(t, flatten(t, h), w));
  };
  CHECK(finite_difference_check(f, x) < 1e-4);
}

TEST_CASE("optimizer_step fixed point, hand-evaluated update and convergence") {
  {
    Tensor p = Tensor::from({2}, {0.3, -0.7}, true);
    ParameterList params{{"p", p}};
    zero_grad(params);
    OptimizerState state({0.01, 0.9, 1e-8});
    optimizer_step(params, state);
    CHECK(p[0] == 0.3);
    CHECK(p[1] == -0.7);
  }
  {
    Tensor p = Tensor::from({1}, {1.0}, true);
    ParameterList params{{"p", p}};
    p.zero_grad();
    p.grad()[0] = 1.0;
    OptimizerState state({0.01, 0.9, 1e-8});
    optimizer_step(params, state);
    CHECK(p[0] == doctest::Approx(1.0 - 0.01 / (std::sqrt(0.1) + 1e-8)).epsilon(1e-14));
    CHECK(p.grad()[0] == 0.0);
  }
  {
    Tensor w = Tensor::from({1}, {1.0}, true);
    ParameterList params{{"w", w}};
    OptimizerState state({0.01, 0.9, 1e-8});
    int steps = 0;
    for (; steps < 500 && std::abs(w[0]) >= 1e-2; ++steps) {
      Tape tape;
      tape.backward(sum(tape, mul(tape, w, w)));
      optimizer_step(params, state);
    }
    CHECK(std::abs(w[0]) < 1e-2);
  }
  {
    Tensor p({1}, 0.0, true);
    OptimizerState state;
    CHECK_THROWS_AS(optimizer_step({{"p", p}}, state), ContractError);
  }
}

TEST_CASE("finite_difference_check on exact functions") {
  Rng rng(12);
  Tensor x = uniform_tensor({5}, -3, 3, rng);
  CHECK(finite_difference_check([](Tape& t, const Tensor& v) { return sum(t, v); }, x) < 1e-10);
  CHECK(finite_difference_check([](Tape& t, const Tensor& v) { return sum(t, mul(t, v, v)); },
                                Tensor::from({3}, {1, 2, 3}), 1e-4) < 1e-6);
}

TEST_CASE("every registered primitive passes the gradient suite") {
  const auto results = run_gradient_suite(2024);
  CHECK(results.size() > 20);
  for (const auto& r : results) {
    INFO(r.name << " max rel err " << r.max_relative_error);
    CHECK(r.passed);
  }
}
