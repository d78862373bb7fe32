#pragma once

#include "azgan/formation.hpp"
#include "azgan/metrics.hpp"
#include "azgan/recognition.hpp"
#include "azgan/synthetic.hpp"
#include "azgan/training.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace azgan {

/// Every tunable of a run. The top-level seed drives dataset rendering,
/// chipping and network initialization.
struct RunConfig {
  std::uint64_t seed = 7;
  std::filesystem::path output_dir = "run";

  int class_count = 3;
  std::vector<TargetClassSpec> classes;  // empty: default catalogue
  DatasetOptions dataset;

  FormationConfig formation{10.0, 0.0, 10, 32};
  std::vector<double> intervals_deg = {5.0, 10.0, 15.0, 20.0};

  Index network_size = 32;
  NetworkConfig networks;
  TrainConfig training;
  bool per_class_models = true;

  SsimConfig metrics;
  // azimuth probe: the experiment classifier stages with two outputs, fitted
  // to a dense rendering with its own speckle seed
  double probe_azimuth_step_deg = 0.18;
  int probe_epochs = 25;
  int probe_batch_size = 32;
  double probe_learning_rate = 1e-3;

  SocConfig experiment;

  std::vector<TargetClassSpec> class_specs() const;
  /// Copies shared fields (sizes, seeds, clip bound, class count) into the
  /// module configs.
  void synchronize();
  /// Throws ValidationError listing every violation.
  void validate() const;
};

/// Strict parse: unknown keys and type mismatches are reported together.
/// Each override is `section.key=value` with a JSON or bare-string value.
RunConfig parse_config(const std::string& json_text, const std::vector<std::string>& overrides = {});
RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
std::string config_to_json(const RunConfig& config);
/// FNV-1a 64 of the canonical JSON without output_dir, as 16 hex digits.
std::string config_hash(const RunConfig& config);

struct StageOutput {
  std::vector<std::filesystem::path> artifacts;  // relative to output_dir
  std::vector<std::string> summary;
  bool passed = true;
};

StageOutput run_synth_data(const RunConfig& config);
StageOutput run_pairs(const RunConfig& config);
StageOutput run_train(const RunConfig& config);
StageOutput run_generate(const RunConfig& config);
StageOutput run_eval(const RunConfig& config);
StageOutput run_atr(const RunConfig& config);
StageOutput run_gradcheck(const RunConfig& config);

/// Writes manifests/<subcommand>.json listing the config hash, seed and
/// artifacts.
void write_run_manifest(const RunConfig& config, const std::string& subcommand, const StageOutput& output);

/// Reads the images of a data manifest; throws DependencyError naming
/// `synth-data` when absent.
std::vector<LabeledImage> load_split(const RunConfig& config, const std::string& split);

/// Combinations of one split at one interval, re-indexed into `images`.
std::vector<Combination> load_combinations(const RunConfig& config, const std::string& split, double interval_deg,
                                           const std::vector<LabeledImage>& images, int class_id);

std::string interval_tag(double interval_deg);

struct EvalSummary {
  double mse_vs_real = 0.0;
  double ssim_vs_real = 0.0;
  double mssim_vs_real = 0.0;
  double azimuth_error_deg = 0.0;  // probe on generated images
  double probe_error_on_reals_deg = 0.0;
  double mse_vs_truth = 0.0;  // against the noise-free render at the target azimuth
  double baseline_mse_vs_truth = 0.0;  // pixel average of the two inputs
  std::size_t count = 0;
};

EvalSummary read_eval_summary(const RunConfig& config);

}  // namespace azgan
