#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "azgan/errors.hpp"
#include "azgan/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

using namespace azgan;

namespace {

constexpr Index kSize = 16;

NetworkConfig tiny_networks() {
  NetworkConfig n;
  n.generator.input_size = kSize;
  n.generator.input_channels = {4, 4};
  n.generator.input_residual_blocks = 1;
  n.generator.fuse_residual_blocks = 1;
  n.generator.map_channels = {4};
  n.discriminator.input_size = kSize;
  n.discriminator.channels = {4, 6};
  n.discriminator.strides = {2, 2};
  n.predictor.input_size = kSize;
  n.predictor.channels = {4, 6, 6};
  n.predictor.strides = {2, 2, 2};
  return n;
}

TrainConfig tiny_train(int updates) {
  TrainConfig t;
  t.batch_size = 4;
  t.fake_pool_size = 8;
  t.max_generator_updates = updates;
  t.seed = 11;
  return t;
}

std::vector<TrainingExample> random_examples(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto image = [&] {
    Image img(kSize, kSize);
    for (Index i = 0; i < img.size(); ++i) img.data()[i] = u(rng);
    return img;
  };
  std::vector<TrainingExample> out(count);
  for (auto& e : out) {
    e.input_a = image();
    e.input_b = image();
    e.reals = {image(), image()};
    e.target_azimuth_deg = 360.0 * u(rng);
  }
  return out;
}

Eigen::VectorXd flat(const ParameterList& params) {
  Index n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  Eigen::VectorXd v(n);
  Index at = 0;
  for (const auto& p : params) {
    v.segment(at, p.tensor.numel()) = p.tensor.values();
    at += p.tensor.numel();
  }
  return v;
}

bool same_reports(const std::vector<LossReport>& a, const std::vector<LossReport>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].iteration != b[i].iteration || a[i].l_do != b[i].l_do || a[i].l_da != b[i].l_da || a[i].l_g != b[i].l_g ||
        a[i].score_real != b[i].score_real || a[i].score_fake != b[i].score_fake) {
      return false;
    }
  }
  return true;
}

double value_of(Tensor (*fn)(Tape&, const Tensor&, const Tensor&), const Tensor& a, const Tensor& b) {
  Tape tape(false);
  return fn(tape, a, b).item();
}

}  // namespace

TEST_CASE("discriminator loss closed forms") {
  const Tensor zero = Tensor::from({1}, {0.0});
  CHECK(std::abs(value_of(loss_discriminator, zero, zero) - 2.0 * std::numbers::ln2) < 1e-10);
  CHECK(value_of(loss_discriminator, Tensor::from({1}, {50.0}), Tensor::from({1}, {-50.0})) < 1e-20);
  const double huge = value_of(loss_discriminator, Tensor::from({1}, {1e6}), Tensor::from({1}, {-1e6}));
  CHECK(std::isfinite(huge));
  CHECK(value_of(loss_discriminator, Tensor::from({1}, {0.3}), zero) <
        value_of(loss_discriminator, Tensor::from({1}, {0.2}), zero));
  CHECK_THROWS_AS(value_of(loss_discriminator, Tensor(), zero), ContractError);
}

TEST_CASE("predictor loss is the mean absolute difference") {
  CHECK(value_of(loss_predictor, Tensor::from({1}, {0.30}), Tensor::from({1}, {0.25})) == std::abs(0.30 - 0.25));
  CHECK(value_of(loss_predictor, Tensor::from({2}, {0.1, -0.3}), Tensor::from({2}, {0.0, 0.0})) ==
        doctest::Approx(0.2).epsilon(1e-15));
  CHECK(value_of(loss_predictor, Tensor::from({1}, {0.7}), Tensor::from({1}, {0.7})) == 0.0);
  Rng rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    const double p = u(rng), t = u(rng);
    CHECK(value_of(loss_predictor, Tensor::from({1}, {p}), Tensor::from({1}, {t})) == std::abs(p - t));
  }
}

TEST_CASE("generator loss closed form and decoupling") {
  Tape tape(false);
  const double l = loss_generator(tape, Tensor::from({1}, {0.0}), Tensor::from({1}, {0.30}),
                                  Tensor::from({1}, {0.25}), 1.0)
                       .item();
  CHECK(std::abs(l - (std::log(0.5) + 0.05)) < 1e-10);
  const double l0 = loss_generator(tape, Tensor::from({1}, {0.0}), Tensor(), Tensor(), 0.0).item();
  CHECK(std::abs(l0 - std::log(0.5)) < 1e-12);
  CHECK(loss_generator(tape, Tensor::from({1}, {50.0}), Tensor::from({1}, {0.2}), Tensor::from({1}, {0.2}), 1.0)
            .item() < -49.0);

  Tape grad_tape;
  Tensor predicted = Tensor::from({1}, {0.4}, true);
  const Tensor loss =
      loss_generator(grad_tape, Tensor::from({1}, {0.1}, true), predicted, Tensor::from({1}, {0.1}), 0.0);
  grad_tape.backward(loss);
  CHECK((!predicted.has_grad() || predicted.grad().isZero(0.0)));
}

TEST_CASE("two-parameter critic matches a closed-form loss and gradient") {
  // score(x) = w*x + b on scalar "images"
  const double w0 = 0.7, b0 = -0.2;
  const std::vector<double> real = {1.0, 2.0, -0.5}, fake = {0.3, -1.5};
  Tensor w = Tensor::from({1}, {w0}, true);
  Tensor b = Tensor::from({1}, {b0}, true);
  Tape tape;
  auto score_items = [&](const std::vector<double>& xs) {
    Tensor acc;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      Tensor s = add(tape, scale(tape, w, xs[i]), b);
      acc = i == 0 ? s : concat_batch(tape, acc, s);
    }
    return acc;
  };
  const Tensor loss = loss_discriminator(tape, score_items(real), score_items(fake));
  tape.backward(loss);

  auto sigma = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  double expect = 0.0, gw = 0.0, gb = 0.0;
  for (double x : real) {
    const double s = w0 * x + b0;
    expect -= std::log(sigma(s)) / real.size();
    gw -= (1.0 - sigma(s)) * x / real.size();
    gb -= (1.0 - sigma(s)) / real.size();
  }
  for (double x : fake) {
    const double s = w0 * x + b0;
    expect -= std::log(1.0 - sigma(s)) / fake.size();
    gw += sigma(s) * x / fake.size();
    gb += sigma(s) / fake.size();
  }
  CHECK(std::abs(loss.item() - expect) < 1e-10);
  CHECK(std::abs(w.grad()[0] - gw) < 1e-10);
  CHECK(std::abs(b.grad()[0] - gb) < 1e-10);
}

TEST_CASE("critic losses touch only their own network") {
  ModelState state(tiny_networks(), tiny_train(0));
  const auto ex = random_examples(4, 5);
  std::vector<const Image*> imgs;
  for (const auto& e : ex) imgs.push_back(&e.reals[0]);
  const Tensor batch = stack_images(imgs);
  zero_grad(state.discriminator.parameters());
  zero_grad(state.predictor.parameters());
  {
    Tape tape;
    const Tensor s = state.discriminator.forward(tape, batch, Mode::kTrain);
    tape.backward(loss_discriminator(tape, s, s));
  }
  double critic_grad = 0.0;
  for (const auto& p : state.discriminator.parameters()) critic_grad += p.tensor.grad().cwiseAbs().sum();
  CHECK(critic_grad > 0.0);
  for (const auto& p : state.predictor.parameters()) CHECK(p.tensor.grad().isZero(0.0));
  zero_grad(state.discriminator.parameters());
  {
    Tape tape;
    const Tensor p = state.predictor.forward(tape, batch, Mode::kTrain);
    tape.backward(loss_predictor(tape, p, Tensor(Shape{4, 1}, 0.5)));
  }
  for (const auto& p : state.discriminator.parameters()) CHECK(p.tensor.grad().isZero(0.0));
  double predictor_grad = 0.0;
  for (const auto& p : state.predictor.parameters()) predictor_grad += p.tensor.grad().cwiseAbs().sum();
  CHECK(predictor_grad > 0.0);
}

TEST_CASE("clipping holds after every critic update and the schedule is 25:1") {
  ModelState state(tiny_networks(), tiny_train(0));
  const auto ex = random_examples(10, 6);
  TrainConfig cfg = tiny_train(8);
  cfg.discriminator_optimizer.learning_rate = 5e-3;
  int checks = 0;
  double worst = 0.0;
  train_loop(state, ex, cfg, {}, [&](const ModelState& s) {
    worst = std::max(worst, max_abs_parameter(s.discriminator.parameters()));
    ++checks;
  });
  CHECK(checks == 8 * 25);
  CHECK(worst <= 0.01);
  CHECK(worst == doctest::Approx(0.01));
  CHECK(state.iteration == 200);
  CHECK(state.generator_updates * 25 == state.iteration);
}

TEST_CASE("training is deterministic and resumable") {
  const auto ex = random_examples(9, 7);
  for (int pool : {0, 8}) {
    CAPTURE(pool);
    TrainConfig cfg = tiny_train(3);
    cfg.critic_updates_per_gen = 3;
    cfg.fake_pool_size = pool;
    ModelState a(tiny_networks(), cfg), b(tiny_networks(), cfg);
    const auto ra = train_loop(a, ex, cfg).reports;
    const auto rb = train_loop(b, ex, cfg).reports;
    CHECK(ra.size() == 3);
    CHECK(same_reports(ra, rb));
    CHECK(flat(a.generator.parameters()) == flat(b.generator.parameters()));

    const auto path = std::filesystem::temp_directory_path() / "azgan-test-ckpt.bin";
    save_checkpoint(path, a);
    {
      std::ifstream in(path, std::ios::binary);
      char magic[4];
      in.read(magic, 4);
      CHECK(std::string(magic, 4) == "AZGN");
    }
    cfg.max_generator_updates = 6;
    const auto cont = train_loop(a, ex, cfg).reports;
    ModelState c(tiny_networks(), tiny_train(0));
    load_checkpoint(path, c);
    CHECK(c.generator_updates == 3);
    const auto resumed = train_loop(c, ex, cfg).reports;
    CHECK(same_reports(cont, resumed));
    CHECK(flat(a.discriminator.parameters()) == flat(c.discriminator.parameters()));
    std::filesystem::remove(path);
  }
}

TEST_CASE("zero generator updates leaves the state unchanged") {
  TrainConfig cfg = tiny_train(0);
  ModelState fresh(tiny_networks(), cfg), run(tiny_networks(), cfg);
  const auto out = train_loop(run, random_examples(5, 8), cfg);
  CHECK(out.reports.empty());
  CHECK(run.iteration == 0);
  CHECK(flat(run.generator.parameters()) == flat(fresh.generator.parameters()));
  CHECK(flat(run.discriminator.parameters()) == flat(fresh.discriminator.parameters()));
  CHECK(flat(run.predictor.parameters()) == flat(fresh.predictor.parameters()));
}

TEST_CASE("without the azimuth term the generator ignores the predictor") {
  const auto ex = random_examples(8, 9);
  auto run = [&](double weight, std::uint64_t predictor_seed) {
    TrainConfig cfg = tiny_train(3);
    cfg.critic_updates_per_gen = 2;
    cfg.azimuth_loss_weight = weight;
    ModelState s(tiny_networks(), cfg);
    Rng rng(predictor_seed);
    std::normal_distribution<double> n(0.0, 0.05);
    for (const auto& p : s.predictor.parameters()) {
      Tensor t = p.tensor;
      for (Index i = 0; i < t.numel(); ++i) t[i] = n(rng);
    }
    train_loop(s, ex, cfg);
    return flat(s.generator.parameters());
  };
  CHECK(run(0.0, 1) == run(0.0, 2));
  CHECK(run(1.0, 1) != run(1.0, 2));
}

TEST_CASE("training preconditions") {
  TrainConfig cfg = tiny_train(1);
  ModelState s(tiny_networks(), cfg);
  CHECK_THROWS_AS(train_loop(s, {}, cfg), InsufficientDataError);
  TrainConfig bad = cfg;
  bad.critic_updates_per_gen = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.clip_bound = 0.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.azimuth_loss_weight = -1.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.fake_pool_size = 2;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.bin", s), DependencyError);
}

TEST_CASE("non-finite inputs abort with the offending term") {
  TrainConfig cfg = tiny_train(1);
  ModelState s(tiny_networks(), cfg);
  auto ex = random_examples(4, 10);
  for (auto& e : ex) e.reals[0](0, 0) = e.reals[1](0, 0) = std::nan("");
  try {
    train_loop(s, ex, cfg);
    FAIL("expected NumericalAbort");
  } catch (const NumericalAbort& e) {
    CHECK(std::string(e.what()).find("L_Do") != std::string::npos);
  }
}

TEST_CASE("loss CSV layout") {
  const auto path = std::filesystem::temp_directory_path() / "azgan-test-loss.csv";
  write_loss_csv(path, {{25, 1.5, 0.25, -0.5, 0.001, -0.002}});
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "iter,L_Do,L_Da,L_G,score_real,score_fake");
  CHECK(row == "25,1.5,0.25,-0.5,0.001,-0.002");
  std::filesystem::remove(path);
}

TEST_CASE("network range maps the crop peak to one") {
  Image img = Image::Zero(20, 20);
  img(10, 10) = 4.0;
  img(9, 9) = 1.0;
  img(0, 0) = 100.0;  // outside the crop
  const Image r = to_network_range(img, 16);
  CHECK(r.rows() == 16);
  CHECK(r.maxCoeff() == 1.0);
  CHECK(r.minCoeff() == 0.0);
  CHECK(r(7, 7) == 0.25);
  CHECK_THROWS_AS(to_network_range(img, 24), ExtentError);
}
