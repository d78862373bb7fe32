#include "azgan/recognition.hpp"

#include "azgan/errors.hpp"
#include "azgan/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

namespace azgan {

void ClassifierSpec::validate() const {
  std::string problems;
  if (input_size < 1) problems += "classifier input_size must be positive; ";
  if (class_count < 2) problems += "classifier needs at least 2 classes; ";
  if (stages.empty()) problems += "classifier needs at least one stage; ";
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const bool last = i + 1 == stages.size();
    if (!last && s.channels < 1) problems += "classifier stage widths must be positive; ";
    if (s.kernel < 0 || s.stride < 1 || s.padding < 0 || s.pool < 0) problems += "invalid classifier stage geometry; ";
  }
  if (problems.empty()) {
    const auto ext = extents();
    if (std::any_of(ext.begin(), ext.end(), [](Index e) { return e < 1; })) {
      problems += "classifier stages shrink the map below 1x1; ";
    } else if (ext.back() != 1) {
      problems += "classifier must end at 1x1, got " + std::to_string(ext.back()) + "; ";
    }
  }
  if (!problems.empty()) throw ValidationError(problems);
}

std::vector<Index> ClassifierSpec::extents() const {
  std::vector<Index> out{input_size};
  Index e = input_size;
  for (const auto& s : stages) {
    const Index k = s.kernel == 0 ? e + 2 * s.padding : s.kernel;
    e = conv_out_extent(e, k, s.stride, s.padding);
    if (s.pool > 0 && e >= s.pool) e = conv_out_extent(e, s.pool, s.pool, 0);
    else if (s.pool > 0) e = 0;
    out.push_back(e);
  }
  return out;
}

Classifier::Classifier(const ClassifierSpec& spec, Rng& rng) : spec_(spec) {
  spec_.validate();
  const auto ext = spec_.extents();
  Index in = 1;
  for (std::size_t i = 0; i < spec_.stages.size(); ++i) {
    const auto& s = spec_.stages[i];
    const bool last = i + 1 == spec_.stages.size();
    const Index out = last ? spec_.class_count : s.channels;
    const Index k = s.kernel == 0 ? ext[i] + 2 * s.padding : s.kernel;
    // He initialization: there is no normalization to rescale activations
    const double std = std::sqrt(2.0 / static_cast<double>(in * k * k));
    convs_.push_back(add_conv("stage" + std::to_string(i), in, out, k, {s.stride, s.padding}, true, rng, std));
    in = out;
  }
}

Tensor Classifier::forward(Tape& tape, const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != spec_.input_size ||
      images.dim(3) != spec_.input_size) {
    throw ShapeError("classifier expects [B,1," + std::to_string(spec_.input_size) + "," +
                     std::to_string(spec_.input_size) + "], got " + shape_string(images.shape()));
  }
  Tensor x = images;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    x = apply(tape, convs_[i], x);
    if (i + 1 == convs_.size()) break;
    x = lrelu(tape, x, 0.0);
    const Index pool = spec_.stages[i].pool;
    if (pool > 0) x = maxpool2d(tape, x, pool, pool);
  }
  return flatten(tape, x);
}

std::vector<Tensor> Classifier::trace_forward(Tape& tape, const std::vector<Tensor>& inputs) {
  return {forward(tape, inputs.at(0))};
}

std::vector<int> Classifier::predict(const std::vector<const Image*>& images, std::size_t batch) {
  std::vector<int> out;
  out.reserve(images.size());
  for (std::size_t b = 0; b < images.size(); b += batch) {
    const std::vector<const Image*> chunk(images.begin() + static_cast<std::ptrdiff_t>(b),
                                          images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), b + batch)));
    Tape tape(false);
    const Tensor logits = forward(tape, stack_images(chunk));
    const Index c = logits.dim(1);
    for (Index i = 0; i < logits.dim(0); ++i) {
      Index best = 0;
      for (Index j = 1; j < c; ++j)
        if (logits[i * c + j] > logits[i * c + best]) best = j;
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

void ClassifierTrainConfig::validate() const {
  std::string problems;
  if (epochs < 0) problems += "classifier epochs must be >= 0; ";
  if (batch_size < 1) problems += "classifier batch_size must be positive; ";
  if (!(optimizer.learning_rate > 0.0)) problems += "classifier learning rate must be positive; ";
  if (!problems.empty()) throw ValidationError(problems);
}

Image classifier_range(const Image& pixels) {
  const double peak = pixels.maxCoeff();
  return peak > 0.0 ? Image(pixels / peak) : pixels;
}

Classifier train_classifier(const ClassifierSpec& spec, const std::vector<LabeledImage>& images,
                            const ClassifierTrainConfig& config, std::uint64_t seed) {
  config.validate();
  std::set<int> classes;
  for (const auto& img : images) {
    if (img.class_id < 0 || img.class_id >= spec.class_count) {
      throw ContractError("label " + std::to_string(img.class_id) + " outside [0," + std::to_string(spec.class_count) + ")");
    }
    classes.insert(img.class_id);
  }
  if (classes.size() < 2) throw InsufficientDataError("classifier training needs at least 2 classes present");
  Rng init(derive_seed(seed, 1));
  Classifier net(spec, init);
  OptimizerState opt(config.optimizer);
  Rng shuffle(derive_seed(seed, 2));
  std::vector<Image> inputs;
  inputs.reserve(images.size());
  for (const auto& img : images) inputs.push_back(classifier_range(img.pixels));
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(config.batch_size);
  for (int e = 0; e < config.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), shuffle);
    for (std::size_t b = 0; b < order.size(); b += batch) {
      std::vector<const Image*> x;
      std::vector<int> y;
      for (std::size_t i = b; i < std::min(order.size(), b + batch); ++i) {
        x.push_back(&inputs[order[i]]);
        y.push_back(images[order[i]].class_id);
      }
      Tape tape;
      const Tensor loss = softmax_cross_entropy(tape, net.forward(tape, stack_images(x)), y);
      if (!std::isfinite(loss.item())) throw NumericalAbort("non-finite classifier loss in epoch " + std::to_string(e));
      zero_grad(net.parameters());
      tape.backward(loss);
      optimizer_step(net.parameters(), opt);
    }
  }
  return net;
}

void AzimuthProbeConfig::validate() const {
  if (epochs < 0 || batch_size < 2 || !(optimizer.learning_rate > 0.0)) {
    throw ValidationError("azimuth probe needs epochs >= 0, batch_size >= 2 and a positive learning rate");
  }
  ClassifierSpec s = network;
  s.class_count = 2;
  s.validate();
}

Classifier train_azimuth_probe(const AzimuthProbeConfig& config, const std::vector<Image>& images,
                               const std::vector<double>& azimuths_deg, std::uint64_t seed) {
  config.validate();
  if (images.empty() || images.size() != azimuths_deg.size()) {
    throw ContractError("azimuth probe needs one azimuth per image and at least one image");
  }
  ClassifierSpec spec = config.network;
  spec.class_count = 2;
  Rng init(derive_seed(seed, 1));
  Classifier net(spec, init);
  OptimizerState opt(config.optimizer);
  Rng shuffle(derive_seed(seed, 2));
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(config.batch_size);
  for (int e = 0; e < config.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), shuffle);
    for (std::size_t b = 0; b < order.size(); b += batch) {
      const std::size_t n = std::min(batch, order.size() - b);
      std::vector<const Image*> x;
      Tensor target({static_cast<Index>(n), 2});
      for (std::size_t i = 0; i < n; ++i) {
        x.push_back(&images[order[b + i]]);
        const double rad = azimuths_deg[order[b + i]] * std::numbers::pi / 180.0;
        target[static_cast<Index>(2 * i)] = std::cos(rad);
        target[static_cast<Index>(2 * i + 1)] = std::sin(rad);
      }
      Tape tape;
      const Tensor diff = sub(tape, net.forward(tape, stack_images(x)), target);
      const Tensor loss = mean(tape, mul(tape, diff, diff));
      if (!std::isfinite(loss.item())) throw NumericalAbort("non-finite azimuth probe loss in epoch " + std::to_string(e));
      zero_grad(net.parameters());
      tape.backward(loss);
      optimizer_step(net.parameters(), opt);
    }
  }
  return net;
}

std::vector<double> predict_azimuths(Classifier& probe, const std::vector<Image>& images, std::size_t batch) {
  std::vector<double> out;
  out.reserve(images.size());
  for (std::size_t b = 0; b < images.size(); b += batch) {
    std::vector<const Image*> x;
    for (std::size_t i = b; i < std::min(images.size(), b + batch); ++i) x.push_back(&images[i]);
    Tape tape(false);
    const Tensor pred = probe.forward(tape, stack_images(x));
    for (Index i = 0; i < pred.dim(0); ++i) {
      out.push_back(wrap_degrees(std::atan2(pred[2 * i + 1], pred[2 * i]) * 180.0 / std::numbers::pi));
    }
  }
  return out;
}

Accuracy evaluate_accuracy(Classifier& classifier, const std::vector<LabeledImage>& images) {
  if (images.empty()) throw ContractError("evaluate_accuracy: empty test set");
  std::vector<Image> inputs;
  inputs.reserve(images.size());
  for (const auto& img : images) inputs.push_back(classifier_range(img.pixels));
  std::vector<const Image*> ptrs;
  for (const auto& img : inputs) ptrs.push_back(&img);
  const auto pred = classifier.predict(ptrs);
  std::map<int, std::pair<std::size_t, std::size_t>> tally;  // correct, total
  std::size_t correct = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto& t = tally[images[i].class_id];
    ++t.second;
    if (pred[i] == images[i].class_id) {
      ++t.first;
      ++correct;
    }
  }
  Accuracy acc;
  for (const auto& [c, t] : tally) acc.per_class[c] = static_cast<double>(t.first) / static_cast<double>(t.second);
  acc.count = images.size();
  acc.overall = static_cast<double>(correct) / static_cast<double>(images.size());
  return acc;
}

std::vector<ExperimentResult> run_soc_experiment(const SocInputs& in, const SocConfig& config) {
  if (in.combinations.empty()) throw InsufficientDataError("SOC experiment needs at least one combination");
  if (!in.generated.empty() && in.generated.size() != in.combinations.size()) {
    throw ContractError("generated images (" + std::to_string(in.generated.size()) + ") do not match combinations (" +
                        std::to_string(in.combinations.size()) + ")");
  }
  if (config.chip_count < 1) throw ValidationError("chip_count must be positive");
  const int chip = static_cast<int>(config.classifier.input_size);

  std::set<std::string> test_ids;
  for (const auto& t : in.test) test_ids.insert(t.id);
  std::vector<LabeledImage> test;
  test.reserve(in.test.size());
  for (const auto& t : in.test) {
    LabeledImage c = t;
    c.pixels = center_crop(t.pixels, chip);
    test.push_back(std::move(c));
  }

  std::vector<ExperimentResult> results;
  for (std::uint64_t seed : config.seeds) {
    std::vector<LabeledImage> primitive;
    for (std::size_t k = 0; k < in.combinations.size(); ++k) {
      const LabeledImage& src = in.train.at(in.combinations[k].input_a);
      if (test_ids.count(src.id) != 0) throw ContractError("image " + src.id + " is in both train and test sets");
      const Box box = centered_box(static_cast<int>(src.pixels.rows()), config.target_extent);
      auto chips = chip_augment(src, config.chip_count, chip, box, derive_seed(seed, 1000 + k));
      primitive.insert(primitive.end(), chips.begin(), chips.end());
    }
    std::vector<LabeledImage> evolved = primitive;
    for (std::size_t k = 0; k < in.generated.size(); ++k) {
      LabeledImage g;
      g.id = "gen-" + std::to_string(k);
      g.pixels = in.generated[k];
      g.class_id = in.train.at(in.combinations[k].input_a).class_id;
      g.azimuth_deg = in.combinations[k].target_azimuth_deg;
      g.source = ImageSource::kGenerated;
      for (int r = 0; r < config.chip_count; ++r) evolved.push_back(g);
    }
    for (const auto* set : {&primitive, &evolved}) {
      ExperimentResult r;
      r.condition = set == &primitive ? "primitive" : "evolved";
      r.seed = seed;
      r.train_size = set->size();
      Classifier net = train_classifier(config.classifier, *set, config.training, seed);
      r.accuracy = evaluate_accuracy(net, test);
      results.push_back(std::move(r));
    }
  }
  return results;
}

double mean_accuracy(const std::vector<ExperimentResult>& results, const std::string& condition) {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : results) {
    if (r.condition != condition) continue;
    sum += r.accuracy.overall;
    ++n;
  }
  return n > 0 ? sum / n : 0.0;
}

void write_experiment_csv(const std::filesystem::path& path, const std::vector<ExperimentResult>& results) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << "condition,seed,train_size,class_id,accuracy\n";
  char line[160];
  for (const auto& r : results) {
    for (const auto& [c, a] : r.accuracy.per_class) {
      std::snprintf(line, sizeof line, "%s,%llu,%zu,%d,%.6f\n", r.condition.c_str(),
                    static_cast<unsigned long long>(r.seed), r.train_size, c, a);
      out << line;
    }
    std::snprintf(line, sizeof line, "%s,%llu,%zu,all,%.6f\n", r.condition.c_str(),
                  static_cast<unsigned long long>(r.seed), r.train_size, r.accuracy.overall);
    out << line;
  }
  for (const char* condition : {"primitive", "evolved"}) {
    double lo = 1.0;
    std::size_t size = 0;
    bool any = false;
    for (const auto& r : results) {
      if (r.condition != condition) continue;
      lo = std::min(lo, r.accuracy.overall);
      size = r.train_size;
      any = true;
    }
    if (!any) continue;
    std::snprintf(line, sizeof line, "%s,mean,%zu,all,%.6f\n%s,min,%zu,all,%.6f\n", condition, size,
                  mean_accuracy(results, condition), condition, size, lo);
    out << line;
  }
}

}  // namespace azgan
