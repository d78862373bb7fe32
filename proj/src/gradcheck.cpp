#include "azgan/gradcheck.hpp"

#include "azgan/ops.hpp"
#include "azgan/random.hpp"

#include <algorithm>
#include <cmath>

namespace azgan {

double finite_difference_check(const ScalarFunction& f, const Tensor& point, double h) {
  Tensor x(point.shape(), point.values(), true);
  Tape tape;
  Tensor loss = f(tape, x);
  tape.backward(loss);
  const Eigen::VectorXd analytic = x.has_grad() ? x.grad() : Eigen::VectorXd::Zero(x.numel());

  double worst = 0.0;
  for (Index i = 0; i < x.numel(); ++i) {
    Tensor probe(point.shape(), point.values(), false);
    const double base = probe[i];
    probe[i] = base + h;
    Tape off_plus(false);
    const double fp = f(off_plus, probe).item();
    probe[i] = base - h;
    Tape off_minus(false);
    const double fm = f(off_minus, probe).item();
    const double central = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(central), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - central) / denom);
  }
  return worst;
}

namespace {

// Projects a tensor onto fixed random weights so every coordinate of the
// output contributes a distinct gradient.
Tensor project(Tape& tape, const Tensor& y, const Tensor& weights) {
  return sum(tape, mul(tape, y, weights));
}

// Offsets whose fractional parts stay away from integer sampling positions,
// where bilinear interpolation has kinks.
Tensor interior_offsets(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> frac(0.15, 0.85);
  std::uniform_int_distribution<int> whole(-1, 0);
  for (Index i = 0; i < t.numel(); ++i) t[i] = whole(rng) + frac(rng);
  return t;
}

struct Case {
  std::string name;
  ScalarFunction f;
  Tensor point;
};

std::vector<Case> primitive_cases(Rng& rng) {
  std::vector<Case> cases;
  const BatchNormOptions no_update{1e-5, 0.9, false};

  {
    Tensor x = uniform_tensor({2, 2, 5, 5}, -1, 1, rng);
    Tensor k = uniform_tensor({3, 2, 3, 3}, -1, 1, rng);
    Tensor b = uniform_tensor({3}, -1, 1, rng);
    const Conv2dOptions opt{2, 1};
    Tensor r = uniform_tensor({2, 3, 3, 3}, -1, 1, rng);
    cases.push_back({"conv2d/input",
                     [=](Tape& t, const Tensor& v) { return project(t, conv2d(t, v, k, b, opt), r); }, x});
    cases.push_back({"conv2d/kernel",
                     [=](Tape& t, const Tensor& v) { return project(t, conv2d(t, x, v, b, opt), r); }, k});
    cases.push_back({"conv2d/bias",
                     [=](Tape& t, const Tensor& v) { return project(t, conv2d(t, x, k, v, opt), r); }, b});
  }
  {
    Tensor x = uniform_tensor({2, 2, 5, 5}, -1, 1, rng);
    Tensor k = uniform_tensor({2, 2, 3, 3}, -1, 1, rng);
    Tensor off = interior_offsets({2, 18, 5, 5}, rng);
    const Conv2dOptions opt{1, 1};
    Tensor r = uniform_tensor({2, 2, 5, 5}, -1, 1, rng);
    cases.push_back({"deformable_conv2d/input",
                     [=](Tape& t, const Tensor& v) {
                       return project(t, deformable_conv2d(t, v, k, off, opt), r);
                     },
                     x});
    cases.push_back({"deformable_conv2d/kernel",
                     [=](Tape& t, const Tensor& v) {
                       return project(t, deformable_conv2d(t, x, v, off, opt), r);
                     },
                     k});
    cases.push_back({"deformable_conv2d/offsets",
                     [=](Tape& t, const Tensor& v) {
                       return project(t, deformable_conv2d(t, x, k, v, opt), r);
                     },
                     off});
  }
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    const std::string tag = mode == Mode::kTrain ? "train" : "eval";
    Tensor x = uniform_tensor({2, 2, 2, 2}, -1, 1, rng);
    Tensor g = uniform_tensor({2}, 0.5, 1.5, rng);
    Tensor b = uniform_tensor({2}, -1, 1, rng);
    Tensor r = uniform_tensor({2, 2, 2, 2}, -1, 1, rng);
    BatchNormStats stats(2);
    stats.mean << 0.1, -0.2;
    stats.var << 0.7, 1.3;
    auto bn = [=](Tape& t, const Tensor& xi, const Tensor& gi, const Tensor& bi) {
      BatchNormStats s = stats;
      return project(t, batch_norm(t, xi, gi, bi, s, mode, no_update), r);
    };
    cases.push_back({"batch_norm[" + tag + "]/input",
                     [=](Tape& t, const Tensor& v) { return bn(t, v, g, b); }, x});
    cases.push_back({"batch_norm[" + tag + "]/gamma",
                     [=](Tape& t, const Tensor& v) { return bn(t, x, v, b); }, g});
    cases.push_back({"batch_norm[" + tag + "]/beta",
                     [=](Tape& t, const Tensor& v) { return bn(t, x, g, v); }, b});
  }
  {
    Tensor x = uniform_tensor({3, 4}, -1, 1, rng);
    Tensor r = uniform_tensor({3, 4}, -1, 1, rng);
    cases.push_back({"lrelu", [=](Tape& t, const Tensor& v) { return project(t, lrelu(t, v, 0.2), r); }, x});
    cases.push_back({"tanh", [=](Tape& t, const Tensor& v) { return project(t, tanh(t, v), r); }, x});
    cases.push_back({"abs", [=](Tape& t, const Tensor& v) { return project(t, abs(t, v), r); }, x});
    cases.push_back(
        {"log_sigmoid", [=](Tape& t, const Tensor& v) { return project(t, log_sigmoid(t, v), r); }, x});
    cases.push_back(
        {"clamp", [=](Tape& t, const Tensor& v) { return project(t, clamp(t, v, -0.5, 0.5), r); }, x});
    Tensor y = uniform_tensor({3, 4}, -1, 1, rng);
    cases.push_back({"residual_add",
                     [=](Tape& t, const Tensor& v) { return project(t, residual_add(t, v, y), r); }, x});
    cases.push_back({"mul", [=](Tape& t, const Tensor& v) { return project(t, mul(t, v, y), r); }, x});
    cases.push_back({"mul/self", [=](Tape& t, const Tensor& v) { return project(t, mul(t, v, v), r); }, x});
    cases.push_back({"mean", [=](Tape& t, const Tensor& v) { return mean(t, mul(t, v, r)); }, x});
  }
  {
    Tensor x = uniform_tensor({2, 2, 4, 4}, -1, 1, rng);
    Tensor r = uniform_tensor({2, 2, 2, 2}, -1, 1, rng);
    cases.push_back({"maxpool2d",
                     [=](Tape& t, const Tensor& v) { return project(t, maxpool2d(t, v, 2, 2), r); }, x});
  }
  {
    Tensor x = uniform_tensor({3, 6}, -1, 1, rng);
    Tensor w = uniform_tensor({6}, -1, 1, rng);
    Tensor r = uniform_tensor({3, 1}, -1, 1, rng);
    cases.push_back({"linear/input", [=](Tape& t, const Tensor& v) { return project(t, linear(t, v, w), r); }, x});
    cases.push_back({"linear/weight", [=](Tape& t, const Tensor& v) { return project(t, linear(t, x, v), r); }, w});
  }
  {
    Tensor a = uniform_tensor({2, 1, 3, 3}, -1, 1, rng);
    Tensor b = uniform_tensor({2, 2, 3, 3}, -1, 1, rng);
    Tensor r = uniform_tensor({2, 3, 3, 3}, -1, 1, rng);
    cases.push_back({"concat_channels",
                     [=](Tape& t, const Tensor& v) { return project(t, concat_channels(t, v, b), r); }, a});
    Tensor r3 = uniform_tensor({2, 2, 3, 3}, -1, 1, rng);
    cases.push_back({"concat_batch+slice_batch",
                     [=](Tape& t, const Tensor& v) {
                       return project(t, slice_batch(t, concat_batch(t, v, b), 1, 2), r3);
                     },
                     b});
  }
  {
    Tensor z = uniform_tensor({4, 3}, -2, 2, rng);
    const std::vector<int> labels{0, 2, 1, 2};
    cases.push_back({"softmax_cross_entropy",
                     [=](Tape& t, const Tensor& v) { return softmax_cross_entropy(t, v, labels); }, z});
  }
  return cases;
}

// Random stack of up to `depth` layers over a [2,2,8,8] input, finished by
// flatten + vector multiplication.
Case random_composite(int index, Rng& rng) {
  std::uniform_int_distribution<int> depth_dist(1, 5);
  std::uniform_int_distribution<int> kind_dist(0, 5);
  const int depth = depth_dist(rng);
  Tensor x = uniform_tensor({2, 2, 8, 8}, -1, 1, rng);

  struct Layer {
    int kind;
    Tensor kernel, bias, gamma, beta, offsets;
    Conv2dOptions opt;
  };
  std::vector<Layer> layers;
  Shape shape = x.shape();
  std::string name = "composite" + std::to_string(index) + ":";
  for (int d = 0; d < depth; ++d) {
    Layer l{};
    l.kind = kind_dist(rng);
    const Index c = shape[1];
    const Index h = shape[2];
    if (l.kind == 3 && h < 4) l.kind = 2;
    switch (l.kind) {
      case 0: {  // conv
        const Index stride = (h >= 8) ? 2 : 1;
        l.opt = {stride, 1};
        l.kernel = uniform_tensor({3, c, 3, 3}, -0.5, 0.5, rng);
        l.bias = uniform_tensor({3}, -0.1, 0.1, rng);
        shape = {shape[0], 3, conv_out_extent(h, 3, stride, 1), conv_out_extent(shape[3], 3, stride, 1)};
        name += "conv,";
        break;
      }
      case 1:
        l.gamma = uniform_tensor({c}, 0.5, 1.5, rng);
        l.beta = uniform_tensor({c}, -0.2, 0.2, rng);
        name += "bn,";
        break;
      case 2:
        name += "lrelu,";
        break;
      case 3:
        shape = {shape[0], c, h / 2, shape[3] / 2};
        name += "maxpool,";
        break;
      case 4:
        l.opt = {1, 1};
        l.kernel = uniform_tensor({c, c, 3, 3}, -0.5, 0.5, rng);
        l.offsets = interior_offsets({shape[0], 18, h, shape[3]}, rng);
        name += "deform,";
        break;
      default:
        l.kernel = uniform_tensor({c, c, 3, 3}, -0.5, 0.5, rng);
        l.bias = uniform_tensor({c}, -0.1, 0.1, rng);
        l.opt = {1, 1};
        name += "residual,";
        break;
    }
    layers.push_back(l);
  }
  name.pop_back();
  Tensor w = uniform_tensor({shape_numel(shape) / shape[0]}, -1, 1, rng);
  Tensor r = uniform_tensor({shape[0], 1}, -1, 1, rng);

  ScalarFunction f = [layers, w, r](Tape& t, const Tensor& input) {
    Tensor h = input;
    for (const Layer& l : layers) {
      switch (l.kind) {
        case 0:
          h = conv2d(t, h, l.kernel, l.bias, l.opt);
          break;
        case 1: {
          BatchNormStats s(h.dim(1));
          h = batch_norm(t, h, l.gamma, l.beta, s, Mode::kTrain, {1e-5, 0.9, false});
          break;
        }
        case 2:
          h = lrelu(t, h, 0.2);
          break;
        case 3:
          h = maxpool2d(t, h, 2, 2);
          break;
        case 4:
          h = deformable_conv2d(t, h, l.kernel, l.offsets, l.opt);
          break;
        default:
          h = residual_add(t, h, tanh(t, conv2d(t, h, l.kernel, l.bias, l.opt)));
          break;
      }
    }
    return project(t, linear(t, flatten(t, h), w), r);
  };
  return {name, f, x};
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed, int composites, double tolerance) {
  Rng rng(seed);
  std::vector<Case> cases = primitive_cases(rng);
  for (int i = 0; i < composites; ++i) cases.push_back(random_composite(i, rng));
  std::vector<GradCheckResult> results;
  results.reserve(cases.size());
  for (const Case& c : cases) {
    const double err = finite_difference_check(c.f, c.point);
    results.push_back({c.name, err, err < tolerance});
  }
  return results;
}

}  // namespace azgan
