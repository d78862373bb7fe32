// Acceptance run: one PASS/FAIL line per criterion.

#include "azgan/errors.hpp"
#include "azgan/gradcheck.hpp"
#include "azgan/io.hpp"
#include "azgan/metrics.hpp"
#include "azgan/pipeline.hpp"
#include "azgan/random.hpp"
#include "oracles.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>

using namespace azgan;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

const fs::path kWork = "acceptance-work";

// Desk-scale configuration shared by criteria 5-7.
RunConfig desk_config(const fs::path& dir) {
  return parse_config(R"({
    "seed": 7,
    "dataset": {"class_count": 3},
    "formation": {"interval_deg": 10, "intervals_deg": [5, 10, 15, 20]},
    "network": {
      "size": 32,
      "generator": {"input_channels": [8, 16], "input_residual_blocks": 1, "fuse_residual_blocks": 1,
                    "map_channels": [16]},
      "discriminator": {"channels": [8, 16, 32]},
      "predictor": {"channels": [8, 16, 32]}
    },
    "training": {
      "max_generator_updates": 600,
      "fake_pool_size": 16,
      "generator_optimizer": {"learning_rate": 1e-4},
      "discriminator_optimizer": {"learning_rate": 5e-4},
      "predictor_optimizer": {"learning_rate": 5e-5}
    },
    "experiment": {"seeds": [1, 2, 3, 4, 5]}
  })",
                      {"output_dir=\"" + dir.string() + "\""});
}

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  const auto results = run_gradient_suite(1, 5, 1e-4);
  double worst = 0.0;
  bool all = true;
  int deformable = 0, composites = 0;
  for (const auto& r : results) {
    worst = std::max(worst, r.max_relative_error);
    all = all && r.passed;
    if (r.name.find("deformable") != std::string::npos) ++deformable;
    if (r.name.find("composite") != std::string::npos) ++composites;
  }
  const double t = seconds_since(t0);
  return {all && deformable >= 3 && composites == 5 && t < 60.0,
          fmt("%zu checks (%d deformable, %d composites), max rel error %.3g, %.1f s", results.size(), deformable,
              composites, worst, t)};
}

Outcome criterion_oracles() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  std::uniform_int_distribution<int> size(3, 60);
  std::uniform_int_distribution<int> half_degrees(0, 719);
  int mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> az(static_cast<std::size_t>(size(rng)));
    for (auto& a : az) a = half_degrees(rng) * 0.5;
    const double delta = 5.0 * (1 + trial % 4), eps = std::array{0.5, 1.0, 2.0}[trial % 3];
    const auto got = form_combinations(az, delta, eps);
    const auto want = oracle::combinations(az, delta, eps);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i) {
      same = got[i].input_a == want[i].input_a && got[i].input_b == want[i].input_b &&
             got[i].target_azimuth_deg == want[i].target_azimuth_deg && got[i].reals == want[i].reals;
    }
    mismatches += !same;
  }
  std::uniform_int_distribution<int> side(8, 40);
  std::uniform_real_distribution<double> u(0.0, 255.0);
  const double c1 = SsimConfig{}.c1, c2 = SsimConfig{}.c2;
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Index h = side(rng), w = side(rng);
    Image x(h, w), y(h, w);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
    for (Index i = 0; i < y.size(); ++i) y.data()[i] = u(rng);
    if (t % 2) y = 0.7 * x + 0.3 * y;
    worst = std::max(worst, std::abs(mse(x, y) - oracle::mse(x, y)));
    worst = std::max(worst, std::abs(ssim(x, y) - oracle::ssim(x, y, c1, c2)));
    worst = std::max(worst, std::abs(mssim(x, y) - oracle::mssim(x, y, 8, 4, c1, c2)));
  }
  const double t = seconds_since(t0);
  return {mismatches == 0 && worst < 1e-9 && t < 30.0,
          fmt("%d/100 combination mismatches, metric max deviation %.3g, %.1f s", mismatches, worst, t)};
}

Outcome criterion_protocol() {
  RunConfig cfg = desk_config(kWork / "protocol");
  auto specs = cfg.class_specs();
  const Split split = split_train_test(build_dataset({specs[0]}, cfg.dataset));
  const auto combos = form_combinations(split.train, cfg.formation);
  const auto examples = make_examples(split.train, combos, cfg.network_size);
  TrainConfig t = cfg.training;
  t.max_generator_updates = 500 / t.critic_updates_per_gen;
  ModelState state(cfg.networks, t);
  std::int64_t checks = 0, violations = 0;
  double worst = 0.0;
  train_loop(state, examples, t, {}, [&](const ModelState& s) {
    const double m = max_abs_parameter(s.discriminator.parameters());
    worst = std::max(worst, m);
    violations += m > 0.01;
    ++checks;
  });
  const bool ratio = state.iteration == 500 && state.generator_updates * 25 == state.iteration;
  return {violations == 0 && checks == 500 && ratio,
          fmt("%lld critic updates checked, max |w| %.6f, %lld generator updates for %lld iterations",
              static_cast<long long>(checks), worst, static_cast<long long>(state.generator_updates),
              static_cast<long long>(state.iteration))};
}

Outcome criterion_losses() {
  Tape tape(false);
  const Tensor zero = Tensor::from({1}, {0.0});
  const double ld = loss_discriminator(tape, zero, zero).item();
  const double lg =
      loss_generator(tape, zero, Tensor::from({1}, {0.30}), Tensor::from({1}, {0.25}), 1.0).item();
  Rng rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  bool exact = true;
  for (int i = 0; i < 100; ++i) {
    const double p = u(rng), q = u(rng);
    exact = exact && loss_predictor(tape, Tensor::from({1}, {p}), Tensor::from({1}, {q})).item() == std::abs(p - q);
  }
  const double e1 = std::abs(ld - 2.0 * std::numbers::ln2);
  const double e2 = std::abs(lg - (std::log(0.5) + 0.05));
  return {e1 <= 1e-10 && e2 <= 1e-10 && exact,
          fmt("L_Do(0,0) off by %.2g, L_G(0, 0.05, 1) off by %.2g, L_Da exact on 100 pairs: %s", e1, e2,
              exact ? "yes" : "no")};
}

struct DeskRun {
  RunConfig config;
  double train_seconds = 0.0;
  bool ok = false;
  std::string error;
};

DeskRun& desk_run() {
  static DeskRun run = [] {
    DeskRun r;
    r.config = desk_config(kWork / "desk");
    try {
      fs::remove_all(r.config.output_dir);
      run_synth_data(r.config);
      run_pairs(r.config);
      const auto t0 = Clock::now();
      write_run_manifest(r.config, "train", run_train(r.config));
      r.train_seconds = seconds_since(t0);
      write_run_manifest(r.config, "generate", run_generate(r.config));
      write_run_manifest(r.config, "eval", run_eval(r.config));
      r.ok = true;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    return r;
  }();
  return run;
}

Outcome criterion_controllability() {
  const DeskRun& run = desk_run();
  if (!run.ok) return {false, "desk run failed: " + run.error};
  const EvalSummary s = read_eval_summary(run.config);
  const bool mse_ok = s.mse_vs_truth < 0.9 * s.baseline_mse_vs_truth;
  const bool az_ok = s.azimuth_error_deg < run.config.formation.interval_deg / 2.0;
  const bool time_ok = run.train_seconds < 15 * 60;
  return {mse_ok && az_ok && time_ok,
          fmt("MSE vs truth %.5f against input-average %.5f (needs < %.5f); probe azimuth error %.2f deg "
              "(needs < %.1f; probe on held-out reals %.2f deg); %d updates x %d classes in %.0f s",
              s.mse_vs_truth, s.baseline_mse_vs_truth, 0.9 * s.baseline_mse_vs_truth, s.azimuth_error_deg,
              run.config.formation.interval_deg / 2.0, s.probe_error_on_reals_deg,
              run.config.training.max_generator_updates, run.config.class_count, run.train_seconds)};
}

Outcome criterion_monotonicity() {
  const DeskRun& run = desk_run();
  if (!run.ok) return {false, "desk run failed: " + run.error};
  std::map<double, long> totals;
  {
    std::ifstream in(run.config.output_dir / "pairs/counts.csv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto f = split_csv_line(line);
      if (f[1] == "train") totals[std::stod(f[0])] += std::stol(f[3]);
    }
  }
  bool counts_ok = totals.size() >= 4;
  long prev = -1;
  std::string count_text;
  for (const auto& [d, n] : totals) {
    if (prev >= 0 && n > prev) counts_ok = false;
    prev = n;
    count_text += fmt("%s%g:%ld", count_text.empty() ? "" : " ", d, n);
  }

  std::map<double, double> mse_at;
  for (double delta : {5.0, 20.0}) {
    RunConfig c = run.config;
    c.output_dir = kWork / ("interval-" + interval_tag(delta));
    c.formation.interval_deg = delta;
    c.formation.tolerance_deg = 0.0;
    c.synchronize();
    c.validate();
    fs::remove_all(c.output_dir);
    run_synth_data(c);
    run_pairs(c);
    run_train(c);
    run_generate(c);
    run_eval(c);
    mse_at[delta] = read_eval_summary(c).mse_vs_real;
  }
  return {counts_ok && mse_at[5.0] <= mse_at[20.0],
          fmt("combinations per interval {%s}; trained MSE d=5 %.5f vs d=20 %.5f", count_text.c_str(), mse_at[5.0],
              mse_at[20.0])};
}

Outcome criterion_atr() {
  const DeskRun& run = desk_run();
  if (!run.ok) return {false, "desk run failed: " + run.error};
  const auto t0 = Clock::now();
  write_run_manifest(run.config, "atr", run_atr(run.config));
  const double t = seconds_since(t0);
  std::ifstream in(run.config.output_dir / "atr/report.csv");
  std::string line;
  double prim = -1, evo = -1;
  while (std::getline(in, line)) {
    const auto f = split_csv_line(line);
    if (f.size() == 5 && f[1] == "mean") (f[0] == "primitive" ? prim : evo) = std::stod(f[4]);
  }
  return {evo >= prim && prim >= 0 && t < 600.0,
          fmt("mean accuracy over %zu seeds: primitive %.4f, evolved %.4f; %.0f s", run.config.experiment.seeds.size(),
              prim, evo, t)};
}

std::map<std::string, std::string> output_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension();
    if (ext != ".csv" && ext != ".bin") continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    out[fs::relative(e.path(), root).generic_string()] = ss.str();
  }
  return out;
}

Outcome criterion_determinism() {
  std::vector<std::map<std::string, std::string>> runs;
  for (const char* name : {"determinism-a", "determinism-b"}) {
    RunConfig c = parse_config(R"({
      "seed": 11,
      "dataset": {"class_count": 2, "azimuth_step_deg": 2.4},
      "network": {"generator": {"input_channels": [4, 8], "input_residual_blocks": 1, "fuse_residual_blocks": 1,
                                "map_channels": [8]},
                  "discriminator": {"channels": [4, 8, 8]}, "predictor": {"channels": [4, 8, 8]}},
      "training": {"max_generator_updates": 4, "critic_updates_per_gen": 5, "checkpoint_every": 2},
      "metrics": {"probe_epochs": 2},
      "experiment": {"seeds": [1, 2], "epochs": 2}
    })",
                               {std::string("output_dir=") + (kWork / name).string()});
    fs::remove_all(c.output_dir);
    for (auto stage : {run_synth_data, run_pairs, run_train, run_generate, run_eval, run_atr}) stage(c);
    runs.push_back(output_bytes(c.output_dir));
  }
  std::size_t differing = 0, checkpoints = 0;
  for (const auto& [path, bytes] : runs[0]) {
    auto it = runs[1].find(path);
    if (it == runs[1].end() || it->second != bytes) ++differing;
    if (path.ends_with(".bin")) ++checkpoints;
  }
  if (runs[0].size() != runs[1].size()) ++differing;
  return {differing == 0 && checkpoints > 0 && !runs[0].empty(),
          fmt("%zu CSV/checkpoint files compared (%zu checkpoints), %zu differ", runs[0].size(), checkpoints, differing)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", criterion_gradients},
      {"oracle equivalence", criterion_oracles},
      {"protocol invariants", criterion_protocol},
      {"loss correctness", criterion_losses},
      {"azimuth controllability", criterion_controllability},
      {"interval monotonicity", criterion_monotonicity},
      {"recognition direction", criterion_atr},
      {"determinism", criterion_determinism},
  };
  fs::create_directories(kWork);
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.passed;
    std::printf("criterion %zu [%s] %s: %s (%.0f s)\n", i + 1, o.passed ? "PASS" : "FAIL", criteria[i].first.c_str(),
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
