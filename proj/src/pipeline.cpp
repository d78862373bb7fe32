#include "azgan/pipeline.hpp"

#include "azgan/errors.hpp"
#include "azgan/gradcheck.hpp"
#include "azgan/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace azgan {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// configuration

namespace {

json optimizer_json(const RmsPropOptions& o) {
  return {{"learning_rate", o.learning_rate}, {"decay", o.decay}, {"epsilon", o.epsilon}};
}

json critic_json(const CriticSpec& c) {
  return {{"channels", c.channels},
          {"strides", c.strides},
          {"lrelu_alpha", c.lrelu_alpha},
          {"use_deformable", c.use_deformable},
          {"deformable_stage", c.deformable_stage}};
}

json class_json(const TargetClassSpec& s) {
  json scatterers = json::array();
  for (const auto& p : s.scatterers) {
    scatterers.push_back({p.offset_x, p.offset_y, p.amplitude, p.anisotropy, p.orientation_deg});
  }
  return {{"lobe_sigma", s.lobe_sigma}, {"base_extent", s.base_extent}, {"scatterers", scatterers}};
}

json to_json(const RunConfig& c) {
  json stages = json::array();
  for (const auto& s : c.experiment.classifier.stages) stages.push_back({s.channels, s.kernel, s.stride, s.padding, s.pool});
  json classes = json::array();
  for (const auto& s : c.classes) classes.push_back(class_json(s));
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir.string()},
      {"dataset",
       {{"class_count", c.class_count},
        {"classes", classes},
        {"azimuth_step_deg", c.dataset.azimuth_step_deg},
        {"jitter_deg", c.dataset.jitter_deg},
        {"size", c.dataset.size},
        {"speckle_looks", c.dataset.speckle_looks}}},
      {"formation",
       {{"interval_deg", c.formation.interval_deg},
        {"intervals_deg", c.intervals_deg},
        {"tolerance_deg", c.formation.tolerance_deg},
        {"chip_count", c.formation.chip_count},
        {"chip_size", c.formation.chip_size}}},
      {"network",
       {{"size", c.network_size},
        {"generator",
         {{"input_channels", c.networks.generator.input_channels},
          {"input_residual_blocks", c.networks.generator.input_residual_blocks},
          {"fuse_residual_blocks", c.networks.generator.fuse_residual_blocks},
          {"map_channels", c.networks.generator.map_channels},
          {"lrelu_alpha", c.networks.generator.lrelu_alpha}}},
        {"discriminator", critic_json(c.networks.discriminator)},
        {"predictor", critic_json(c.networks.predictor)}}},
      {"training",
       {{"critic_updates_per_gen", c.training.critic_updates_per_gen},
        {"clip_bound", c.training.clip_bound},
        {"azimuth_loss_weight", c.training.azimuth_loss_weight},
        {"batch_size", c.training.batch_size},
        {"max_generator_updates", c.training.max_generator_updates},
        {"checkpoint_every", c.training.checkpoint_every},
        {"fake_pool_size", c.training.fake_pool_size},
        {"per_class_models", c.per_class_models},
        {"generator_optimizer", optimizer_json(c.training.generator_optimizer)},
        {"discriminator_optimizer", optimizer_json(c.training.discriminator_optimizer)},
        {"predictor_optimizer", optimizer_json(c.training.predictor_optimizer)}}},
      {"metrics",
       {{"c1", c.metrics.c1},
        {"c2", c.metrics.c2},
        {"window", c.metrics.window},
        {"window_stride", c.metrics.window_stride},
        {"weights", std::vector<double>(c.metrics.weights.data(), c.metrics.weights.data() + c.metrics.weights.size())},
        {"probe_azimuth_step_deg", c.probe_azimuth_step_deg},
        {"probe_epochs", c.probe_epochs},
        {"probe_batch_size", c.probe_batch_size},
        {"probe_learning_rate", c.probe_learning_rate}}},
      {"experiment",
       {{"seeds", c.experiment.seeds},
        {"chip_count", c.experiment.chip_count},
        {"target_extent", c.experiment.target_extent},
        {"epochs", c.experiment.training.epochs},
        {"batch_size", c.experiment.training.batch_size},
        {"learning_rate", c.experiment.training.optimizer.learning_rate},
        {"classifier_stages", stages}}},
  };
}

// Strict reader: every key must be known and of the right type; problems
// accumulate instead of throwing one at a time.
class Reader {
 public:
  Reader(const json& object, std::string path, std::vector<std::string>& problems)
      : object_(object), path_(std::move(path)), problems_(problems) {
    if (!object_.is_object()) problems_.push_back(path_ + ": expected an object");
  }
  Reader(const Reader&) = delete;

  ~Reader() {
    if (!object_.is_object()) return;
    for (const auto& [key, value] : object_.items()) {
      if (!seen_.count(key)) problems_.push_back("unknown key " + where(key));
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!object_.is_object() || !object_.contains(key)) return;
    try {
      const json& v = object_.at(key);
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw std::invalid_argument("expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && v.get<long long>() < 0 && !v.is_number_unsigned()) {
            throw std::invalid_argument("expected a nonnegative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw std::invalid_argument("expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("expected a string");
      }
      out = v.get<T>();
    } catch (const std::exception& e) {
      problems_.push_back(where(key) + ": " + e.what());
    }
  }

  /// Visits a nested object if present.
  template <typename Fn>
  void child(const std::string& key, Fn fn) {
    seen_.insert(key);
    if (!object_.is_object() || !object_.contains(key)) return;
    Reader r(object_.at(key), where(key), problems_);
    if (object_.at(key).is_object()) fn(r);
  }

  /// Raw access for arrays of records.
  const json* raw(const std::string& key) {
    seen_.insert(key);
    if (!object_.is_object() || !object_.contains(key)) return nullptr;
    return &object_.at(key);
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::vector<std::string>& problems() { return problems_; }

 private:
  const json& object_;
  std::string path_;
  std::vector<std::string>& problems_;
  std::set<std::string> seen_;
};

void read_optimizer(Reader& r, const std::string& key, RmsPropOptions& o) {
  r.child(key, [&](Reader& c) {
    c.get("learning_rate", o.learning_rate);
    c.get("decay", o.decay);
    c.get("epsilon", o.epsilon);
  });
}

void read_critic(Reader& r, const std::string& key, CriticSpec& s) {
  r.child(key, [&](Reader& c) {
    c.get("channels", s.channels);
    c.get("strides", s.strides);
    c.get("lrelu_alpha", s.lrelu_alpha);
    c.get("use_deformable", s.use_deformable);
    c.get("deformable_stage", s.deformable_stage);
  });
}

void read_classes(Reader& r, std::vector<TargetClassSpec>& classes) {
  const json* arr = r.raw("classes");
  if (arr == nullptr) return;
  const std::string where = r.where("classes");
  if (!arr->is_array()) {
    r.problems().push_back(where + ": expected an array");
    return;
  }
  classes.clear();
  for (std::size_t i = 0; i < arr->size(); ++i) {
    TargetClassSpec spec;
    spec.class_id = static_cast<int>(i);
    Reader c((*arr)[i], where + "[" + std::to_string(i) + "]", r.problems());
    c.get("lobe_sigma", spec.lobe_sigma);
    c.get("base_extent", spec.base_extent);
    std::vector<std::vector<double>> scatterers;
    c.get("scatterers", scatterers);
    for (const auto& s : scatterers) {
      if (s.size() != 5) {
        r.problems().push_back(where + "[" + std::to_string(i) +
                               "].scatterers: each entry is [offset_x, offset_y, amplitude, anisotropy, orientation_deg]");
        continue;
      }
      spec.scatterers.push_back({s[0], s[1], s[2], s[3], s[4]});
    }
    if (spec.base_extent == 0) spec.base_extent = required_extent(spec);
    classes.push_back(std::move(spec));
  }
}

RunConfig from_json(const json& doc, std::vector<std::string>& problems) {
  RunConfig c;
  Reader root(doc, "", problems);
  root.get("seed", c.seed);
  std::string out_dir = c.output_dir.string();
  root.get("output_dir", out_dir);
  c.output_dir = out_dir;
  root.child("dataset", [&](Reader& r) {
    r.get("class_count", c.class_count);
    read_classes(r, c.classes);
    r.get("azimuth_step_deg", c.dataset.azimuth_step_deg);
    r.get("jitter_deg", c.dataset.jitter_deg);
    r.get("size", c.dataset.size);
    r.get("speckle_looks", c.dataset.speckle_looks);
  });
  root.child("formation", [&](Reader& r) {
    r.get("interval_deg", c.formation.interval_deg);
    r.get("intervals_deg", c.intervals_deg);
    r.get("tolerance_deg", c.formation.tolerance_deg);
    r.get("chip_count", c.formation.chip_count);
    r.get("chip_size", c.formation.chip_size);
  });
  root.child("network", [&](Reader& r) {
    r.get("size", c.network_size);
    r.child("generator", [&](Reader& g) {
      g.get("input_channels", c.networks.generator.input_channels);
      g.get("input_residual_blocks", c.networks.generator.input_residual_blocks);
      g.get("fuse_residual_blocks", c.networks.generator.fuse_residual_blocks);
      g.get("map_channels", c.networks.generator.map_channels);
      g.get("lrelu_alpha", c.networks.generator.lrelu_alpha);
    });
    read_critic(r, "discriminator", c.networks.discriminator);
    read_critic(r, "predictor", c.networks.predictor);
  });
  root.child("training", [&](Reader& r) {
    r.get("critic_updates_per_gen", c.training.critic_updates_per_gen);
    r.get("clip_bound", c.training.clip_bound);
    r.get("azimuth_loss_weight", c.training.azimuth_loss_weight);
    r.get("batch_size", c.training.batch_size);
    r.get("max_generator_updates", c.training.max_generator_updates);
    r.get("checkpoint_every", c.training.checkpoint_every);
    r.get("fake_pool_size", c.training.fake_pool_size);
    r.get("per_class_models", c.per_class_models);
    read_optimizer(r, "generator_optimizer", c.training.generator_optimizer);
    read_optimizer(r, "discriminator_optimizer", c.training.discriminator_optimizer);
    read_optimizer(r, "predictor_optimizer", c.training.predictor_optimizer);
  });
  root.child("metrics", [&](Reader& r) {
    r.get("c1", c.metrics.c1);
    r.get("c2", c.metrics.c2);
    r.get("window", c.metrics.window);
    r.get("window_stride", c.metrics.window_stride);
    std::vector<double> weights;
    r.get("weights", weights);
    if (!weights.empty()) {
      const Index w = c.metrics.window;
      if (static_cast<Index>(weights.size()) != w * w) {
        r.problems().push_back("metrics.weights needs window*window = " + std::to_string(w * w) + " values");
      } else {
        c.metrics.weights = Eigen::Map<const Image>(weights.data(), w, w);
      }
    }
    r.get("probe_azimuth_step_deg", c.probe_azimuth_step_deg);
    r.get("probe_epochs", c.probe_epochs);
    r.get("probe_batch_size", c.probe_batch_size);
    r.get("probe_learning_rate", c.probe_learning_rate);
  });
  root.child("experiment", [&](Reader& r) {
    r.get("seeds", c.experiment.seeds);
    r.get("chip_count", c.experiment.chip_count);
    r.get("target_extent", c.experiment.target_extent);
    r.get("epochs", c.experiment.training.epochs);
    r.get("batch_size", c.experiment.training.batch_size);
    r.get("learning_rate", c.experiment.training.optimizer.learning_rate);
    std::vector<std::vector<Index>> stages;
    r.get("classifier_stages", stages);
    if (!stages.empty()) {
      c.experiment.classifier.stages.clear();
      for (const auto& s : stages) {
        if (s.size() != 5) {
          r.problems().push_back("experiment.classifier_stages: each entry is [channels, kernel, stride, padding, pool]");
          continue;
        }
        c.experiment.classifier.stages.push_back({s[0], s[1], s[2], s[3], s[4]});
      }
    }
  });
  c.synchronize();
  return c;
}

void apply_override(json& doc, const std::string& spec, std::vector<std::string>& problems) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) {
    problems.push_back("override '" + spec + "' is not section.key=value");
    return;
  }
  const std::string key = spec.substr(0, eq);
  const std::string text = spec.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) path.push_back(part);
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (!node->is_object()) {
      problems.push_back("override '" + key + "': '" + path[i - 1] + "' is not a section");
      return;
    }
    if (i + 1 == path.size()) {
      (*node)[path[i]] = value;
    } else {
      node = &(*node)[path[i]];
      if (node->is_null()) *node = json::object();
    }
  }
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::vector<TargetClassSpec> RunConfig::class_specs() const {
  if (!classes.empty()) return classes;
  return default_class_specs(class_count);
}

void RunConfig::synchronize() {
  if (!classes.empty()) class_count = static_cast<int>(classes.size());
  dataset.seed = seed;
  networks.generator.input_size = network_size;
  networks.discriminator.input_size = network_size;
  networks.predictor.input_size = network_size;
  networks.discriminator.clip_bound = training.clip_bound;
  networks.predictor.clip_bound = training.clip_bound;
  experiment.classifier.input_size = formation.chip_size;
  experiment.classifier.class_count = class_count;
}

void RunConfig::validate() const {
  std::vector<std::string> problems;
  auto collect = [&](auto&& check) {
    try {
      check();
    } catch (const Error& e) {
      problems.push_back(e.what());
    }
  };
  if (class_count < 1) problems.push_back("dataset.class_count must be positive");
  if (!(dataset.azimuth_step_deg > 0.0)) problems.push_back("dataset.azimuth_step_deg must be positive");
  if (!(dataset.jitter_deg >= 0.0)) problems.push_back("dataset.jitter_deg must be >= 0");
  if (dataset.speckle_looks < 1) problems.push_back("dataset.speckle_looks must be positive");
  if (class_count >= 1) {
    for (const auto& spec : class_specs()) {
      collect([&] { azgan::validate(spec); });
      if (dataset.size < spec.base_extent + 4) {
        problems.push_back("dataset.size " + std::to_string(dataset.size) + " cannot hold class " +
                           std::to_string(spec.class_id) + " (extent " + std::to_string(spec.base_extent) + " + 4)");
      }
    }
  }
  collect([&] { formation.validate(dataset.size); });
  if (intervals_deg.empty()) problems.push_back("formation.intervals_deg must not be empty");
  for (double d : intervals_deg) {
    FormationConfig f = formation;
    f.interval_deg = d;
    collect([&] { f.validate(dataset.size); });
  }
  if (network_size < 8) problems.push_back("network.size must be >= 8");
  if (network_size > dataset.size) problems.push_back("network.size must not exceed dataset.size");
  if (network_size != formation.chip_size) problems.push_back("network.size must equal formation.chip_size");
  collect([&] { networks.generator.validate(); });
  collect([&] { networks.discriminator.validate(); });
  collect([&] { networks.predictor.validate(); });
  collect([&] { training.validate(); });
  collect([&] { metrics.validate(); });
  if (probe_epochs < 0 || probe_batch_size < 2 || !(probe_learning_rate > 0.0) || !(probe_azimuth_step_deg > 0.0)) {
    problems.push_back("metrics.probe_* need epochs >= 0, batch_size >= 2, positive learning_rate and azimuth_step_deg");
  }
  if (class_count >= 2) collect([&] { experiment.classifier.validate(); });
  collect([&] { experiment.training.validate(); });
  if (experiment.seeds.empty()) problems.push_back("experiment.seeds must not be empty");
  if (experiment.chip_count < 1) problems.push_back("experiment.chip_count must be positive");
  if (experiment.target_extent < 1 || experiment.target_extent > formation.chip_size) {
    problems.push_back("experiment.target_extent must lie in [1, chip_size]");
  }
  if (!problems.empty()) {
    std::string msg = std::to_string(problems.size()) + " configuration problem(s):";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ValidationError(msg);
  }
}

RunConfig parse_config(const std::string& json_text, const std::vector<std::string>& overrides) {
  json doc;
  try {
    doc = json_text.empty() ? json::object() : json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  std::vector<std::string> problems;
  for (const auto& o : overrides) apply_override(doc, o, problems);
  RunConfig config = from_json(doc, problems);
  if (!problems.empty()) {
    std::string msg = std::to_string(problems.size()) + " configuration problem(s):";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ValidationError(msg);
  }
  config.validate();
  return config;
}

RunConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), overrides);
}

std::string config_to_json(const RunConfig& config) { return to_json(config).dump(2); }

std::string config_hash(const RunConfig& config) {
  json doc = to_json(config);
  doc.erase("output_dir");
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a(doc.dump())));
  return hex;
}

// ---------------------------------------------------------------------------
// artifacts

namespace {

fs::path resolve(const RunConfig& c, const fs::path& rel) { return c.output_dir / rel; }

void require(const RunConfig& c, const fs::path& rel, const std::string& producer) {
  if (!fs::exists(resolve(c, rel))) {
    throw DependencyError("missing " + resolve(c, rel).string() + "; run `" + producer + "` first");
  }
}

std::string class_dir(int class_id) { return "c" + std::to_string(class_id); }

fs::path model_dir(const RunConfig& c, int class_id) {
  return fs::path("models") / (c.per_class_models ? class_dir(class_id) : std::string("shared"));
}

fs::path pairs_path(const std::string& split, double interval) {
  return fs::path("pairs") / (split + "-d" + interval_tag(interval) + ".csv");
}

std::vector<double> all_intervals(const RunConfig& c) {
  std::vector<double> out = c.intervals_deg;
  if (std::find(out.begin(), out.end(), c.formation.interval_deg) == out.end()) out.push_back(c.formation.interval_deg);
  return out;
}

ModelState make_state(const RunConfig& c, int class_id) {
  TrainConfig t = c.training;
  t.seed = derive_seed(c.seed, 200 + static_cast<std::uint64_t>(c.per_class_models ? class_id : 0));
  return ModelState(c.networks, t);
}

std::vector<int> model_classes(const RunConfig& c) {
  if (!c.per_class_models) return {0};
  std::vector<int> out;
  for (int k = 0; k < c.class_count; ++k) out.push_back(k);
  return out;
}

std::vector<Combination> model_combinations(const RunConfig& c, const std::string& split,
                                            const std::vector<LabeledImage>& images, int model_class) {
  return load_combinations(c, split, c.formation.interval_deg, images, c.per_class_models ? model_class : -1);
}

struct GeneratedRow {
  std::string id;
  std::string path;
  int class_id = 0;
  double target_azimuth_deg = 0.0;
  std::string input_a, input_b, real;
};

std::vector<GeneratedRow> read_generated(const RunConfig& c, const std::string& split) {
  const fs::path rel = fs::path("generated") / (split + ".csv");
  require(c, rel, "generate");
  std::ifstream in(resolve(c, rel));
  std::string line;
  std::getline(in, line);
  std::vector<GeneratedRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 7) throw FormatError(rel.string() + ": expected 7 columns in '" + line + "'");
    rows.push_back({f[0], f[1], std::stoi(f[2]), std::stod(f[3]), f[4], f[5], f[6]});
  }
  return rows;
}

Image triptych(const Image& a, const Image& b, const Image& g) {
  constexpr Index gap = 2;
  const Index s = a.rows();
  Image sheet = Image::Ones(s, 3 * s + 2 * gap);
  auto panel = [](const Image& img) -> Image {
    const double peak = img.maxCoeff();
    return peak > 0.0 ? Image(img / peak) : img;
  };
  sheet.block(0, 0, s, s) = panel(a);
  sheet.block(0, s + gap, s, s) = panel(b);
  sheet.block(0, 2 * (s + gap), s, s) = panel(g);
  return sheet;
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

std::string interval_tag(double interval_deg) {
  if (std::abs(interval_deg - std::round(interval_deg)) < 1e-9) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02d", static_cast<int>(std::lround(interval_deg)));
    return buf;
  }
  std::string s = format_fixed(interval_deg, 2);
  std::replace(s.begin(), s.end(), '.', 'p');
  return s;
}

std::vector<LabeledImage> load_split(const RunConfig& c, const std::string& split) {
  const fs::path rel = fs::path("data") / (split + ".csv");
  require(c, rel, "synth-data");
  std::vector<LabeledImage> images;
  for (const auto& row : read_manifest(resolve(c, rel))) {
    LabeledImage img;
    img.id = row.path;
    img.pixels = read_pgm(resolve(c, row.path));
    img.class_id = row.class_id;
    img.azimuth_deg = row.azimuth_deg;
    img.depression_deg = row.depression_deg;
    img.source = row.source;
    images.push_back(std::move(img));
  }
  return images;
}

std::vector<Combination> load_combinations(const RunConfig& c, const std::string& split, double interval_deg,
                                           const std::vector<LabeledImage>& images, int class_id) {
  const fs::path rel = pairs_path(split, interval_deg);
  require(c, rel, "pairs");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < images.size(); ++i) index[images[i].id] = i;
  auto lookup = [&](const std::string& p) {
    auto it = index.find(p);
    if (it == index.end()) throw FormatError(rel.string() + " names unknown image " + p);
    return it->second;
  };
  std::ifstream in(resolve(c, rel));
  std::string line;
  std::getline(in, line);
  std::vector<Combination> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 5) throw FormatError(rel.string() + ": expected 5 columns in '" + line + "'");
    if (class_id >= 0 && std::stoi(f[0]) != class_id) continue;
    Combination combo{lookup(f[1]), lookup(f[2]), std::stod(f[3]), {}};
    for (const auto& r : split_csv_line(f[4], ';')) combo.reals.push_back(lookup(r));
    out.push_back(std::move(combo));
  }
  return out;
}

// ---------------------------------------------------------------------------
// stages

StageOutput run_synth_data(const RunConfig& c) {
  StageOutput out;
  const auto images = build_dataset(c.class_specs(), c.dataset);
  const Split split = split_train_test(images);
  for (const auto& [name, set] : {std::pair{std::string("train"), &split.train}, std::pair{std::string("test"), &split.test}}) {
    std::vector<ManifestRow> rows;
    for (const auto& img : *set) {
      const fs::path rel = fs::path("data") / name / (img.id + ".pgm");
      write_pgm(resolve(c, rel), img.pixels);
      rows.push_back({rel.generic_string(), img.class_id, img.azimuth_deg, img.depression_deg, img.source});
      out.artifacts.push_back(rel);
    }
    const fs::path manifest = fs::path("data") / (name + ".csv");
    write_manifest(resolve(c, manifest), rows);
    out.artifacts.push_back(manifest);
    out.summary.push_back(name + ": " + std::to_string(set->size()) + " images");
  }
  return out;
}

StageOutput run_pairs(const RunConfig& c) {
  StageOutput out;
  const fs::path counts_rel = "pairs/counts.csv";
  fs::create_directories(resolve(c, "pairs"));
  std::ofstream counts(resolve(c, counts_rel));
  counts << "interval_deg,split,class_id,combinations\n";
  for (const std::string split : {"train", "test"}) {
    const auto images = load_split(c, split);
    std::vector<std::string> paths;
    for (const auto& img : images) paths.push_back(img.id);
    for (double interval : all_intervals(c)) {
      FormationConfig f = c.formation;
      f.interval_deg = interval;
      const fs::path rel = pairs_path(split, interval);
      std::size_t total = 0;
      bool append = false;
      for (int k = 0; k < c.class_count; ++k) {
        std::vector<std::size_t> members;
        std::vector<double> azimuths;
        for (std::size_t i = 0; i < images.size(); ++i) {
          if (images[i].class_id != k) continue;
          members.push_back(i);
          azimuths.push_back(images[i].azimuth_deg);
        }
        std::vector<Combination> combos;
        if (members.size() >= 3) combos = form_combinations(azimuths, f.interval_deg, f.effective_tolerance());
        for (auto& combo : combos) {
          combo.input_a = members[combo.input_a];
          combo.input_b = members[combo.input_b];
          for (auto& r : combo.reals) r = members[r];
        }
        write_combinations(resolve(c, rel), k, combos, paths, append);
        append = true;
        total += combos.size();
        counts << format_fixed(interval, 2) << ',' << split << ',' << k << ',' << combos.size() << '\n';
      }
      out.artifacts.push_back(rel);
      out.summary.push_back(split + " d=" + format_fixed(interval, 2) + ": " + std::to_string(total) + " combinations");
    }
  }
  out.artifacts.push_back(counts_rel);
  return out;
}

StageOutput run_train(const RunConfig& c) {
  StageOutput out;
  const auto images = load_split(c, "train");
  for (int k : model_classes(c)) {
    const auto combos = model_combinations(c, "train", images, k);
    if (combos.empty()) {
      throw InsufficientDataError("no training combinations for " +
                                  (c.per_class_models ? "class " + std::to_string(k) : std::string("the shared model")) +
                                  " at interval " + format_fixed(c.formation.interval_deg, 2));
    }
    const auto examples = make_examples(images, combos, c.network_size);
    ModelState state = make_state(c, k);
    const fs::path dir = model_dir(c, k);
    TrainConfig t = c.training;
    t.seed = state.seed;
    const auto result = train_loop(state, examples, t, resolve(c, dir));
    for (const auto& p : result.checkpoints) out.artifacts.push_back(dir / p.filename());
    write_loss_csv(resolve(c, dir / "losses.csv"), result.reports);
    save_checkpoint(resolve(c, dir / "model.bin"), state);
    out.artifacts.push_back(dir / "losses.csv");
    out.artifacts.push_back(dir / "model.bin");
    const LossReport last = result.reports.empty() ? LossReport{} : result.reports.back();
    out.summary.push_back(dir.generic_string() + ": " + std::to_string(combos.size()) + " combinations, " +
                          std::to_string(state.generator_updates) + " generator updates, final L_Do " + fmt(last.l_do) +
                          " L_Da " + fmt(last.l_da) + " L_G " + fmt(last.l_g));
  }
  return out;
}

StageOutput run_generate(const RunConfig& c) {
  StageOutput out;
  for (int k : model_classes(c)) require(c, model_dir(c, k) / "model.bin", "train");
  for (const std::string split : {"train", "test"}) {
    const auto images = load_split(c, split);
    const fs::path csv_rel = fs::path("generated") / (split + ".csv");
    fs::create_directories(resolve(c, "generated"));
    std::ofstream csv(resolve(c, csv_rel));
    csv << "generated_id,path,class_id,target_azimuth_deg,input_a_path,input_b_path,real_path\n";
    std::size_t total = 0;
    for (int k : model_classes(c)) {
      const fs::path model = model_dir(c, k) / "model.bin";
      ModelState state = make_state(c, k);
      load_checkpoint(resolve(c, model), state);
      const auto combos = model_combinations(c, split, images, k);
      const auto examples = make_examples(images, combos, c.network_size);
      const auto generated = generate_images(state, examples);
      for (std::size_t i = 0; i < combos.size(); ++i) {
        const auto& combo = combos[i];
        const int cls = images[combo.input_a].class_id;
        char name[48];
        std::snprintf(name, sizeof name, "c%d-%04zu", cls, i);
        const fs::path rel = fs::path("generated") / split / (std::string(name) + ".pgm");
        write_pgm(resolve(c, rel), generated[i]);
        out.artifacts.push_back(rel);
        csv << name << ',' << rel.generic_string() << ',' << cls << ',' << format_fixed(combo.target_azimuth_deg, 4) << ','
            << images[combo.input_a].id << ',' << images[combo.input_b].id << ',' << images[combo.reals.front()].id
            << '\n';
        if (split == "test") {
          const fs::path sheet = fs::path("triptych") / (std::string(name) + ".pgm");
          write_pgm(resolve(c, sheet), triptych(examples[i].input_a, examples[i].input_b, generated[i]));
          out.artifacts.push_back(sheet);
        }
      }
      total += combos.size();
    }
    out.artifacts.push_back(csv_rel);
    out.summary.push_back(split + ": " + std::to_string(total) + " generated images");
  }
  return out;
}

StageOutput run_eval(const RunConfig& c) {
  StageOutput out;
  const auto rows = read_generated(c, "test");
  const auto test = load_split(c, "test");
  std::map<std::string, const LabeledImage*> by_id;
  for (const auto& img : test) by_id[img.id] = &img;
  auto image = [&](const std::string& id) -> const LabeledImage& {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw FormatError("generated/test.csv names unknown image " + id);
    return *it->second;
  };
  const auto specs = c.class_specs();

  // one azimuth probe per class, fitted to a dense independent rendering
  std::map<int, Classifier> probes;
  AzimuthProbeConfig pc;
  pc.network = c.experiment.classifier;
  pc.network.input_size = c.network_size;
  pc.epochs = c.probe_epochs;
  pc.batch_size = c.probe_batch_size;
  pc.optimizer.learning_rate = c.probe_learning_rate;
  DatasetOptions probe_data = c.dataset;
  probe_data.azimuth_step_deg = c.probe_azimuth_step_deg;
  probe_data.seed = derive_seed(c.seed, 400);
  for (int k = 0; k < c.class_count; ++k) {
    std::vector<Image> x;
    std::vector<double> az;
    for (const auto& img : build_dataset({specs[static_cast<std::size_t>(k)]}, probe_data)) {
      x.push_back(to_network_range(img.pixels, c.network_size));
      az.push_back(img.azimuth_deg);
    }
    probes.emplace(k, train_azimuth_probe(pc, x, az, derive_seed(c.seed, 300 + k)));
  }

  const fs::path metrics_rel = "eval/metrics.csv";
  fs::create_directories(resolve(c, "eval"));
  std::ofstream csv(resolve(c, metrics_rel));
  csv << "class_id,real_id,generated_id,target_azimuth_deg,mse,ssim,mssim,predicted_azimuth_deg,azimuth_error_deg,"
         "mse_truth,baseline_mse_truth\n";
  EvalSummary sum;
  double real_probe_err = 0.0;
  std::size_t real_probe_n = 0;
  for (const auto& row : rows) {
    const Image generated = read_pgm(resolve(c, row.path));
    const Image real = center_crop(image(row.real).pixels, c.network_size);
    const MetricsRecord m = compare_images(real, generated, c.metrics);
    const Image truth =
        center_crop(render_noise_free(specs.at(static_cast<std::size_t>(row.class_id)), row.target_azimuth_deg, c.dataset.size),
                    c.network_size);
    const Image average =
        (center_crop(image(row.input_a).pixels, c.network_size) + center_crop(image(row.input_b).pixels, c.network_size)) / 2.0;
    const double mse_truth = mse(truth, generated);
    const double baseline = mse(truth, average);
    double predicted = std::nan("");
    double err = std::nan("");
    if (auto it = probes.find(row.class_id); it != probes.end()) {
      predicted = predict_azimuths(it->second, {to_network_range(generated, c.network_size)})[0];
      err = circular_distance_deg(predicted, row.target_azimuth_deg);
      const double on_real = predict_azimuths(it->second, {to_network_range(image(row.real).pixels, c.network_size)})[0];
      real_probe_err += circular_distance_deg(on_real, image(row.real).azimuth_deg);
      ++real_probe_n;
    }
    csv << row.class_id << ',' << row.real << ',' << row.id << ',' << format_fixed(row.target_azimuth_deg, 4) << ','
        << fmt(m.mse) << ',' << fmt(m.ssim) << ',' << fmt(m.mssim) << ',' << fmt(predicted) << ',' << fmt(err) << ','
        << fmt(mse_truth) << ',' << fmt(baseline) << '\n';
    sum.mse_vs_real += m.mse;
    sum.ssim_vs_real += m.ssim;
    sum.mssim_vs_real += m.mssim;
    sum.azimuth_error_deg += err;
    sum.mse_vs_truth += mse_truth;
    sum.baseline_mse_vs_truth += baseline;
    ++sum.count;
  }
  if (sum.count == 0) throw InsufficientDataError("no generated test images to evaluate");
  const double n = static_cast<double>(sum.count);
  const fs::path summary_rel = "eval/summary.csv";
  std::ofstream s(resolve(c, summary_rel));
  s << "metric,value\n"
    << "count," << sum.count << '\n'
    << "mse," << fmt(sum.mse_vs_real / n) << '\n'
    << "ssim," << fmt(sum.ssim_vs_real / n) << '\n'
    << "mssim," << fmt(sum.mssim_vs_real / n) << '\n'
    << "azimuth_error_deg," << fmt(sum.azimuth_error_deg / n) << '\n'
    << "probe_error_on_reals_deg," << fmt(real_probe_n ? real_probe_err / static_cast<double>(real_probe_n) : std::nan("")) << '\n'
    << "mse_truth," << fmt(sum.mse_vs_truth / n) << '\n'
    << "baseline_mse_truth," << fmt(sum.baseline_mse_vs_truth / n) << '\n';
  out.artifacts = {metrics_rel, summary_rel};
  out.summary.push_back("mse " + fmt(sum.mse_vs_real / n) + ", ssim " + fmt(sum.ssim_vs_real / n) + ", mssim " +
                        fmt(sum.mssim_vs_real / n) + ", azimuth error " + fmt(sum.azimuth_error_deg / n) + " deg");
  out.summary.push_back("against noise-free truth: generated " + fmt(sum.mse_vs_truth / n) + ", input average " +
                        fmt(sum.baseline_mse_vs_truth / n));
  return out;
}

EvalSummary read_eval_summary(const RunConfig& c) {
  require(c, "eval/summary.csv", "eval");
  std::ifstream in(resolve(c, "eval/summary.csv"));
  std::string line;
  std::getline(in, line);
  EvalSummary s;
  while (std::getline(in, line)) {
    const auto f = split_csv_line(line);
    if (f.size() != 2) continue;
    const double v = std::stod(f[1]);
    if (f[0] == "count") s.count = static_cast<std::size_t>(v);
    if (f[0] == "mse") s.mse_vs_real = v;
    if (f[0] == "ssim") s.ssim_vs_real = v;
    if (f[0] == "mssim") s.mssim_vs_real = v;
    if (f[0] == "azimuth_error_deg") s.azimuth_error_deg = v;
    if (f[0] == "probe_error_on_reals_deg") s.probe_error_on_reals_deg = v;
    if (f[0] == "mse_truth") s.mse_vs_truth = v;
    if (f[0] == "baseline_mse_truth") s.baseline_mse_vs_truth = v;
  }
  return s;
}

StageOutput run_atr(const RunConfig& c) {
  StageOutput out;
  SocInputs in;
  in.train = load_split(c, "train");
  in.test = load_split(c, "test");
  in.combinations = load_combinations(c, "train", c.formation.interval_deg, in.train, -1);
  const auto rows = read_generated(c, "train");
  if (rows.size() != in.combinations.size()) {
    throw FormatError("generated/train.csv has " + std::to_string(rows.size()) + " rows for " +
                      std::to_string(in.combinations.size()) + " combinations; rerun `generate`");
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].input_a != in.train[in.combinations[i].input_a].id) {
      throw FormatError("generated/train.csv row " + std::to_string(i) + " does not match pairs; rerun `generate`");
    }
    in.generated.push_back(read_pgm(resolve(c, rows[i].path)));
  }
  const auto results = run_soc_experiment(in, c.experiment);
  const fs::path rel = "atr/report.csv";
  write_experiment_csv(resolve(c, rel), results);
  out.artifacts.push_back(rel);
  out.summary.push_back("primitive mean accuracy " + fmt(mean_accuracy(results, "primitive")) + " (" +
                        std::to_string(results.front().train_size) + " training chips)");
  out.summary.push_back("evolved mean accuracy " + fmt(mean_accuracy(results, "evolved")) + " (" +
                        std::to_string(results[1].train_size) + " training chips)");
  return out;
}

StageOutput run_gradcheck(const RunConfig& c) {
  StageOutput out;
  const auto results = run_gradient_suite(c.seed);
  const fs::path rel = "gradcheck/report.csv";
  fs::create_directories(resolve(c, "gradcheck"));
  std::ofstream csv(resolve(c, rel));
  csv << "check,max_relative_error,passed\n";
  double worst = 0.0;
  for (const auto& r : results) {
    csv << r.name << ',' << fmt(r.max_relative_error) << ',' << (r.passed ? "true" : "false") << '\n';
    worst = std::max(worst, r.max_relative_error);
    out.passed = out.passed && r.passed;
  }
  out.artifacts.push_back(rel);
  out.summary.push_back(std::to_string(results.size()) + " checks, max relative error " + fmt(worst) +
                        (out.passed ? ", all passed" : ", FAILURES"));
  return out;
}

void write_run_manifest(const RunConfig& c, const std::string& subcommand, const StageOutput& output) {
  json artifacts = json::array();
  for (const auto& a : output.artifacts) artifacts.push_back(a.generic_string());
  const json doc = {{"subcommand", subcommand},
                    {"config_hash", config_hash(c)},
                    {"seed", c.seed},
                    {"passed", output.passed},
                    {"artifacts", artifacts},
                    {"summary", output.summary}};
  fs::create_directories(resolve(c, "manifests"));
  std::ofstream out(resolve(c, fs::path("manifests") / (subcommand + ".json")));
  out << doc.dump(2) << '\n';
  std::ofstream cfg(resolve(c, "manifests/config.json"));
  cfg << config_to_json(c) << '\n';
}

}  // namespace azgan
