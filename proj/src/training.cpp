#include "azgan/training.hpp"

#include "azgan/errors.hpp"
#include "azgan/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace azgan {

namespace {
constexpr double kScoreClamp = 50.0;
}

void TrainConfig::validate() const {
  std::string problems;
  if (critic_updates_per_gen < 1) problems += "critic_updates_per_gen must be >= 1; ";
  if (!(clip_bound > 0.0)) problems += "clip_bound must be positive; ";
  if (!(azimuth_loss_weight >= 0.0)) problems += "azimuth_loss_weight must be >= 0; ";
  if (batch_size < 1) problems += "batch_size must be >= 1; ";
  if (max_generator_updates < 0) problems += "max_generator_updates must be >= 0; ";
  if (checkpoint_every < 0) problems += "checkpoint_every must be >= 0; ";
  if (fake_pool_size < 0) problems += "fake_pool_size must be >= 0; ";
  if (fake_pool_size > 0 && fake_pool_size < batch_size) problems += "fake_pool_size must be 0 or >= batch_size; ";
  for (const auto* o : {&generator_optimizer, &discriminator_optimizer, &predictor_optimizer}) {
    if (!(o->learning_rate > 0.0) || !(o->decay >= 0.0 && o->decay < 1.0) || !(o->epsilon > 0.0)) {
      problems += "optimizer settings need lr > 0, decay in [0,1), eps > 0; ";
      break;
    }
  }
  if (!problems.empty()) throw ValidationError(problems);
}

Image to_network_range(const Image& pixels, Index size) {
  if (pixels.rows() < size || pixels.cols() < size) {
    throw ExtentError("image " + std::to_string(pixels.rows()) + "x" + std::to_string(pixels.cols()) +
                      " smaller than network size " + std::to_string(size));
  }
  Image crop = center_crop(pixels, size);
  const double peak = crop.maxCoeff();
  if (peak > 0.0) crop /= peak;
  return crop;
}

std::vector<TrainingExample> make_examples(const std::vector<LabeledImage>& images,
                                           const std::vector<Combination>& combos, Index size) {
  std::vector<TrainingExample> out;
  out.reserve(combos.size());
  for (const auto& c : combos) {
    TrainingExample e;
    e.input_a = to_network_range(images.at(c.input_a).pixels, size);
    e.input_b = to_network_range(images.at(c.input_b).pixels, size);
    for (std::size_t r : c.reals) e.reals.push_back(to_network_range(images.at(r).pixels, size));
    e.target_azimuth_deg = c.target_azimuth_deg;
    e.class_id = images.at(c.input_a).class_id;
    out.push_back(std::move(e));
  }
  return out;
}

Tensor stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw ContractError("stack_images needs at least one image");
  const Index h = images.front()->rows(), w = images.front()->cols();
  Tensor t({static_cast<Index>(images.size()), 1, h, w});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->rows() != h || images[i]->cols() != w) throw ShapeError("stack_images: mixed image sizes");
    std::copy(images[i]->data(), images[i]->data() + h * w, t.data() + static_cast<Index>(i) * h * w);
  }
  return t;
}

Image tensor_image(const Tensor& batch, Index item) {
  const Index h = batch.dim(2), w = batch.dim(3);
  Image img(h, w);
  std::copy(batch.data() + item * batch.dim(1) * h * w, batch.data() + item * batch.dim(1) * h * w + h * w, img.data());
  return img;
}

ModelState::ModelState(const NetworkConfig& nets, const TrainConfig& train)
    : networks(nets),
      generator([&] {
        Rng r(derive_seed(train.seed, 1));
        return Generator(nets.generator, r);
      }()),
      discriminator([&] {
        Rng r(derive_seed(train.seed, 2));
        return Critic(nets.discriminator, r);
      }()),
      predictor([&] {
        Rng r(derive_seed(train.seed, 3));
        return Critic(nets.predictor, r);
      }()),
      generator_opt(train.generator_optimizer),
      discriminator_opt(train.discriminator_optimizer),
      predictor_opt(train.predictor_optimizer),
      seed(train.seed),
      rng(derive_seed(train.seed, 4)) {
  clip_weights(discriminator.parameters(), nets.discriminator.clip_bound);
}

Tensor loss_discriminator(Tape& tape, const Tensor& real_scores, const Tensor& fake_scores) {
  if (real_scores.numel() == 0 || fake_scores.numel() == 0) throw ContractError("loss_discriminator: empty scores");
  const Tensor r = clamp(tape, real_scores, -kScoreClamp, kScoreClamp);
  const Tensor f = clamp(tape, fake_scores, -kScoreClamp, kScoreClamp);
  const Tensor total = add(tape, mean(tape, log_sigmoid(tape, r)), mean(tape, log_sigmoid(tape, scale(tape, f, -1.0))));
  return scale(tape, total, -1.0);
}

Tensor loss_predictor(Tape& tape, const Tensor& predicted, const Tensor& target) {
  if (predicted.numel() != target.numel()) throw ShapeError("loss_predictor: batch sizes differ");
  return mean(tape, abs(tape, sub(tape, predicted, reshape(tape, target, predicted.shape()))));
}

Tensor loss_generator(Tape& tape, const Tensor& fake_scores, const Tensor& predicted, const Tensor& target,
                      double weight) {
  if (fake_scores.numel() == 0) throw ContractError("loss_generator: empty scores");
  const Tensor f = clamp(tape, fake_scores, -kScoreClamp, kScoreClamp);
  Tensor adv = mean(tape, log_sigmoid(tape, scale(tape, f, -1.0)));
  if (weight == 0.0) return adv;
  return add(tape, adv, scale(tape, loss_predictor(tape, predicted, target), weight));
}

std::vector<std::size_t> next_batch(ModelState& state, std::size_t examples, std::size_t count) {
  if (examples == 0) throw InsufficientDataError("no training combinations");
  std::vector<std::size_t> out;
  out.reserve(count);
  while (out.size() < count) {
    if (state.cursor >= state.order.size() || state.order.size() != examples) {
      state.order.resize(examples);
      std::iota(state.order.begin(), state.order.end(), 0);
      std::shuffle(state.order.begin(), state.order.end(), state.rng);
      state.cursor = 0;
    }
    out.push_back(state.order[state.cursor++]);
  }
  return out;
}

namespace {

void check_finite(double v, const char* term, std::int64_t iteration) {
  if (!std::isfinite(v)) {
    throw NumericalAbort(std::string("non-finite ") + term + " at iteration " + std::to_string(iteration));
  }
}

Tensor azimuth_targets(const std::vector<TrainingExample>& ex, const std::vector<std::size_t>& idx) {
  Tensor t({static_cast<Index>(idx.size()), 1});
  for (std::size_t i = 0; i < idx.size(); ++i) t[static_cast<Index>(i)] = ex[idx[i]].target_azimuth_deg / 360.0;
  return t;
}

// Shifts each target by whole turns to the copy nearest its prediction, so the
// absolute-difference loss measures circular distance.
Tensor nearest_turn(const Tensor& predicted, Tensor target) {
  for (Index i = 0; i < target.numel(); ++i) target[i] += std::round(predicted[i] - target[i]);
  return target;
}

Tensor generate_batch(ModelState& s, const std::vector<TrainingExample>& ex, const std::vector<std::size_t>& idx,
                      Mode mode) {
  std::vector<const Image*> a, b;
  for (std::size_t i : idx) {
    a.push_back(&ex[i].input_a);
    b.push_back(&ex[i].input_b);
  }
  Tape tape(false);
  return s.generator.forward(tape, stack_images(a), stack_images(b), mode);
}

}  // namespace

LossReport train_step(ModelState& state, const std::vector<TrainingExample>& examples, const TrainConfig& config,
                      const CriticHook& after_critic) {
  const auto batch = static_cast<std::size_t>(config.batch_size);
  const double bound = state.networks.discriminator.clip_bound;
  std::vector<std::size_t> pool;
  Tensor pool_fakes;
  if (config.fake_pool_size > 0) {
    pool = next_batch(state, examples.size(), static_cast<std::size_t>(config.fake_pool_size));
    pool_fakes = generate_batch(state, examples, pool, Mode::kTrain);
  }

  LossReport report;
  double sum_do = 0, sum_da = 0, sum_real = 0, sum_fake = 0;
  for (int k = 0; k < config.critic_updates_per_gen; ++k) {
    std::vector<std::size_t> idx;
    Tensor fakes;
    if (config.fake_pool_size > 0) {
      std::vector<std::size_t> slots(pool.size());
      std::iota(slots.begin(), slots.end(), 0);
      std::shuffle(slots.begin(), slots.end(), state.rng);
      slots.resize(batch);
      std::sort(slots.begin(), slots.end());
      const Index n = pool_fakes.numel() / pool_fakes.dim(0);
      fakes = Tensor({static_cast<Index>(batch), 1, pool_fakes.dim(2), pool_fakes.dim(3)});
      for (std::size_t i = 0; i < batch; ++i) {
        idx.push_back(pool[slots[i]]);
        std::copy(pool_fakes.data() + static_cast<Index>(slots[i]) * n,
                  pool_fakes.data() + static_cast<Index>(slots[i] + 1) * n, fakes.data() + static_cast<Index>(i) * n);
      }
    } else {
      idx = next_batch(state, examples.size(), batch);
      fakes = generate_batch(state, examples, idx, Mode::kTrain);
    }
    std::vector<const Image*> reals;
    for (std::size_t i : idx) {
      const auto& rs = examples[i].reals;
      std::uniform_int_distribution<std::size_t> pick(0, rs.size() - 1);
      reals.push_back(&rs[pick(state.rng)]);
    }
    const Tensor real_batch = stack_images(reals);
    const Index b = static_cast<Index>(batch);

    {
      Tape tape;
      const Tensor scores = state.discriminator.forward(tape, concat_batch(tape, real_batch, fakes), Mode::kTrain);
      const Tensor rs = slice_batch(tape, scores, 0, b);
      const Tensor fs = slice_batch(tape, scores, b, b);
      const Tensor loss = loss_discriminator(tape, rs, fs);
      check_finite(loss.item(), "L_Do", state.iteration);
      zero_grad(state.discriminator.parameters());
      tape.backward(loss);
      optimizer_step(state.discriminator.parameters(), state.discriminator_opt);
      clip_weights(state.discriminator.parameters(), bound);
      sum_do += loss.item();
      sum_real += rs.values().mean();
      sum_fake += fs.values().mean();
    }
    {
      Tape tape;
      const Tensor pred = state.predictor.forward(tape, real_batch, Mode::kTrain);
      const Tensor loss = loss_predictor(tape, pred, nearest_turn(pred, azimuth_targets(examples, idx)));
      check_finite(loss.item(), "L_Da", state.iteration);
      zero_grad(state.predictor.parameters());
      tape.backward(loss);
      optimizer_step(state.predictor.parameters(), state.predictor_opt);
      sum_da += loss.item();
    }
    ++state.iteration;
    if (after_critic) after_critic(state);
  }

  const auto idx = next_batch(state, examples.size(), batch);
  std::vector<const Image*> a, bb;
  for (std::size_t i : idx) {
    a.push_back(&examples[i].input_a);
    bb.push_back(&examples[i].input_b);
  }
  Tape tape;
  const Tensor fakes = state.generator.forward(tape, stack_images(a), stack_images(bb), Mode::kTrain);
  const Tensor scores = state.discriminator.forward(tape, fakes, Mode::kEval);
  Tensor pred, target;
  if (config.azimuth_loss_weight != 0.0) {
    pred = state.predictor.forward(tape, fakes, Mode::kEval);
    target = nearest_turn(pred, azimuth_targets(examples, idx));
  }
  const Tensor loss = loss_generator(tape, scores, pred, target, config.azimuth_loss_weight);
  check_finite(loss.item(), "L_G", state.iteration);
  zero_grad(state.generator.parameters());
  tape.backward(loss);
  optimizer_step(state.generator.parameters(), state.generator_opt);
  zero_grad(state.discriminator.parameters());
  zero_grad(state.predictor.parameters());
  ++state.generator_updates;

  const double n = config.critic_updates_per_gen;
  report.iteration = state.iteration;
  report.l_do = sum_do / n;
  report.l_da = sum_da / n;
  report.l_g = loss.item();
  report.score_real = sum_real / n;
  report.score_fake = sum_fake / n;
  return report;
}

TrainOutputs train_loop(ModelState& state, const std::vector<TrainingExample>& examples, const TrainConfig& config,
                        const std::filesystem::path& checkpoint_dir, const CriticHook& after_critic) {
  config.validate();
  if (examples.empty()) throw InsufficientDataError("training needs at least one combination");
  TrainOutputs out;
  while (state.generator_updates < config.max_generator_updates) {
    out.reports.push_back(train_step(state, examples, config, after_critic));
    if (config.checkpoint_every > 0 && !checkpoint_dir.empty() &&
        state.generator_updates % config.checkpoint_every == 0) {
      char name[48];
      std::snprintf(name, sizeof name, "checkpoint-%06lld.bin", static_cast<long long>(state.generator_updates));
      save_checkpoint(checkpoint_dir / name, state);
      out.checkpoints.push_back(checkpoint_dir / name);
    }
  }
  return out;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossReport>& reports) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << "iter,L_Do,L_Da,L_G,score_real,score_fake\n";
  char line[256];
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%lld,%.10g,%.10g,%.10g,%.10g,%.10g\n", static_cast<long long>(r.iteration), r.l_do,
                  r.l_da, r.l_g, r.score_real, r.score_fake);
    out << line;
  }
}

// Checkpoint layout: "AZGN", u32 version, u32 entry count, then per entry
// u32 name length, name bytes, u32 rank, u32 extents, f64 values. All
// integers and floats little-endian.
namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

struct Entry {
  Shape shape;
  Eigen::VectorXd values;
};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint truncated");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  put_u32(out, static_cast<std::uint32_t>(bits));
  put_u32(out, static_cast<std::uint32_t>(bits >> 32));
}

double get_f64(std::istream& in) {
  const std::uint64_t lo = get_u32(in);
  const std::uint64_t hi = get_u32(in);
  return std::bit_cast<double>(lo | (hi << 32));
}

Eigen::VectorXd split_u64(const std::vector<std::uint64_t>& words) {
  Eigen::VectorXd v(2 * static_cast<Index>(words.size()));
  for (std::size_t i = 0; i < words.size(); ++i) {
    v[2 * static_cast<Index>(i)] = static_cast<double>(words[i] >> 32);
    v[2 * static_cast<Index>(i) + 1] = static_cast<double>(words[i] & 0xFFFFFFFFULL);
  }
  return v;
}

std::vector<std::uint64_t> join_u64(const Eigen::VectorXd& v) {
  std::vector<std::uint64_t> words(static_cast<std::size_t>(v.size() / 2));
  for (std::size_t i = 0; i < words.size(); ++i) {
    words[i] = (static_cast<std::uint64_t>(v[2 * static_cast<Index>(i)]) << 32) |
               static_cast<std::uint64_t>(v[2 * static_cast<Index>(i) + 1]);
  }
  return words;
}

Eigen::VectorXd scalar(double x) { return Eigen::VectorXd::Constant(1, x); }

template <typename Fn>
void for_each_network(ModelState& s, Fn fn) {
  fn("G", static_cast<Network&>(s.generator), s.generator_opt);
  fn("Do", static_cast<Network&>(s.discriminator), s.discriminator_opt);
  fn("Da", static_cast<Network&>(s.predictor), s.predictor_opt);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelState& cstate) {
  auto& state = const_cast<ModelState&>(cstate);
  std::vector<std::pair<std::string, Entry>> entries;
  for_each_network(state, [&](const std::string& tag, Network& net, OptimizerState&) {
    for (const auto& p : net.parameters()) entries.push_back({tag + "/" + p.name, {p.tensor.shape(), p.tensor.values()}});
    for (const auto& s : net.norm_stats()) {
      const Index c = s.stats.mean.size();
      entries.push_back({tag + "/" + s.name + ".running_mean", {{c}, s.stats.mean}});
      entries.push_back({tag + "/" + s.name + ".running_var", {{c}, s.stats.var}});
    }
  });
  for_each_network(state, [&](const std::string& tag, Network&, OptimizerState& opt) {
    for (std::size_t i = 0; i < opt.accumulators.size(); ++i) {
      const auto& a = opt.accumulators[i];
      entries.push_back({"opt." + tag + "/" + std::to_string(i), {{a.size()}, a}});
    }
  });
  entries.push_back({"meta.iteration", {{1}, scalar(static_cast<double>(state.iteration))}});
  entries.push_back({"meta.generator_updates", {{1}, scalar(static_cast<double>(state.generator_updates))}});
  entries.push_back({"meta.seed", {{2}, split_u64({state.seed})}});
  {
    std::ostringstream os;
    os << state.rng;
    std::istringstream is(os.str());
    std::vector<std::uint64_t> words;
    for (std::uint64_t w; is >> w;) words.push_back(w);
    entries.push_back({"meta.rng", {{static_cast<Index>(2 * words.size())}, split_u64(words)}});
  }
  {
    Eigen::VectorXd order(static_cast<Index>(state.order.size()));
    for (std::size_t i = 0; i < state.order.size(); ++i) order[static_cast<Index>(i)] = static_cast<double>(state.order[i]);
    entries.push_back({"meta.order", {{order.size()}, order}});
    entries.push_back({"meta.cursor", {{1}, scalar(static_cast<double>(state.cursor))}});
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write("AZGN", 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, e] : entries) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (Index d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (Index i = 0; i < e.values.size(); ++i) put_f64(out, e.values[i]);
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, ModelState& state) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("checkpoint " + path.string() + " not found; run `train` first");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "AZGN", 4) != 0) throw FormatError(path.string() + ": bad magic");
  const auto version = get_u32(in);
  if (version != kCheckpointVersion) throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  const auto count = get_u32(in);
  std::map<std::string, Entry> entries;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name(get_u32(in), '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) throw FormatError("checkpoint truncated");
    Entry e;
    e.shape.resize(get_u32(in));
    for (auto& d : e.shape) d = get_u32(in);
    e.values.resize(shape_numel(e.shape));
    for (Index i = 0; i < e.values.size(); ++i) e.values[i] = get_f64(in);
    entries[name] = std::move(e);
  }
  auto take = [&](const std::string& name, const Shape& shape) -> const Eigen::VectorXd& {
    auto it = entries.find(name);
    if (it == entries.end()) throw FormatError(path.string() + ": missing entry " + name);
    if (it->second.shape != shape) {
      throw FormatError(path.string() + ": entry " + name + " has shape " + shape_string(it->second.shape) +
                        ", expected " + shape_string(shape));
    }
    return it->second.values;
  };
  for_each_network(state, [&](const std::string& tag, Network& net, OptimizerState& opt) {
    for (const auto& p : net.parameters()) {
      Tensor t = p.tensor;
      t.values() = take(tag + "/" + p.name, t.shape());
    }
    for (auto& s : net.norm_stats()) {
      const Index c = s.stats.mean.size();
      s.stats.mean = take(tag + "/" + s.name + ".running_mean", {c});
      s.stats.var = take(tag + "/" + s.name + ".running_var", {c});
    }
    opt.accumulators.clear();
    for (std::size_t i = 0;; ++i) {
      auto it = entries.find("opt." + tag + "/" + std::to_string(i));
      if (it == entries.end()) break;
      opt.accumulators.push_back(it->second.values);
    }
  });
  state.iteration = static_cast<std::int64_t>(take("meta.iteration", {1})[0]);
  state.generator_updates = static_cast<std::int64_t>(take("meta.generator_updates", {1})[0]);
  state.seed = join_u64(take("meta.seed", {2}))[0];
  {
    const auto& it = entries.at("meta.rng");
    std::ostringstream os;
    for (std::uint64_t w : join_u64(it.values)) os << w << ' ';
    std::istringstream is(os.str());
    is >> state.rng;
  }
  {
    const auto& order = entries.at("meta.order").values;
    state.order.resize(static_cast<std::size_t>(order.size()));
    for (Index i = 0; i < order.size(); ++i) state.order[static_cast<std::size_t>(i)] = static_cast<std::size_t>(order[i]);
    state.cursor = static_cast<std::size_t>(take("meta.cursor", {1})[0]);
  }
}

std::vector<Image> generate_images(ModelState& state, const std::vector<TrainingExample>& examples, std::size_t batch) {
  std::vector<Image> out;
  out.reserve(examples.size());
  for (std::size_t start = 0; start < examples.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(examples.size(), start + batch); ++i) idx.push_back(i);
    const Tensor g = generate_batch(state, examples, idx, Mode::kEval);
    for (Index i = 0; i < g.dim(0); ++i) out.push_back(tensor_image(g, i).cwiseMax(0.0));
  }
  return out;
}

}  // namespace azgan
