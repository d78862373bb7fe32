#pragma once

#include "azgan/formation.hpp"
#include "azgan/networks.hpp"
#include "azgan/optimizer.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace azgan {

struct ClassifierStage {
  Index channels = 8;
  Index kernel = 3;  // 0 spans the remaining extent
  Index stride = 1;
  Index padding = 1;
  Index pool = 0;  // max-pool window and stride after the stage; 0 for none
};

/// Conv/relu stages; the last stage has class_count channels, no relu, and
/// must reduce the map to 1x1.
struct ClassifierSpec {
  Index input_size = 32;
  int class_count = 3;
  std::vector<ClassifierStage> stages = {
      {8, 3, 1, 1, 2}, {16, 3, 1, 1, 2}, {32, 3, 1, 1, 2}, {32, 3, 1, 1, 0}, {0, 0, 1, 0, 0}};

  void validate() const;
  /// Spatial extent entering each stage, plus the final extent.
  std::vector<Index> extents() const;
};

class Classifier : public Network {
 public:
  Classifier(const ClassifierSpec& spec, Rng& rng);

  /// [B,1,S,S] -> [B,class_count] logits.
  Tensor forward(Tape& tape, const Tensor& images);
  std::vector<int> predict(const std::vector<const Image*>& images, std::size_t batch = 64);
  const ClassifierSpec& spec() const { return spec_; }

 private:
  std::vector<Tensor> trace_forward(Tape& tape, const std::vector<Tensor>& inputs) override;

  ClassifierSpec spec_;
  std::vector<Conv> convs_;
};

struct ClassifierTrainConfig {
  int epochs = 12;
  int batch_size = 32;
  RmsPropOptions optimizer{1e-3, 0.9, 1e-8};

  void validate() const;
};

/// Intensity transform applied to every classifier input: division by the
/// image peak.
Image classifier_range(const Image& pixels);

/// Minimizes softmax cross-entropy over shuffled minibatches. Images must
/// already be spec.input_size square.
Classifier train_classifier(const ClassifierSpec& spec, const std::vector<LabeledImage>& images,
                            const ClassifierTrainConfig& config, std::uint64_t seed);

struct Accuracy {
  std::map<int, double> per_class;  // classes present in the test set only
  double overall = 0.0;
  std::size_t count = 0;
};

Accuracy evaluate_accuracy(Classifier& classifier, const std::vector<LabeledImage>& images);

/// Azimuth regressor: a classifier body with two outputs fitted to
/// (cos, sin) of the azimuth under squared error.
struct AzimuthProbeConfig {
  ClassifierSpec network;  // class_count is replaced by 2
  int epochs = 60;
  int batch_size = 16;
  RmsPropOptions optimizer{1e-3, 0.9, 1e-8};

  void validate() const;
};

/// Images must be network.input_size square and already intensity scaled.
Classifier train_azimuth_probe(const AzimuthProbeConfig& config, const std::vector<Image>& images,
                               const std::vector<double>& azimuths_deg, std::uint64_t seed);

/// atan2 of the two outputs, in [0, 360).
std::vector<double> predict_azimuths(Classifier& probe, const std::vector<Image>& images, std::size_t batch = 64);

struct ExperimentResult {
  std::string condition;  // primitive | evolved
  std::uint64_t seed = 0;
  std::size_t train_size = 0;
  Accuracy accuracy;
};

struct SocInputs {
  std::vector<LabeledImage> train;  // images the combinations index into
  std::vector<LabeledImage> test;
  std::vector<Combination> combinations;
  /// One generated image per combination, aligned with `combinations`;
  /// empty makes the evolved set equal to the primitive one.
  std::vector<Image> generated;
};

struct SocConfig {
  ClassifierSpec classifier;
  ClassifierTrainConfig training;
  int chip_count = 10;
  int target_extent = 20;  // centred box every chip must contain
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
};

/// Primitive set: input_a of every combination, chip-augmented. Evolved set:
/// the primitive set plus each generated image, repeated chip_count times.
/// Both are evaluated on centred crops of the test images.
std::vector<ExperimentResult> run_soc_experiment(const SocInputs& inputs, const SocConfig& config);

/// Mean overall accuracy of one condition.
double mean_accuracy(const std::vector<ExperimentResult>& results, const std::string& condition);

/// `condition,seed,train_size,class_id,accuracy`, with class_id "all" for
/// overall rows and seed "mean"/"min" for the aggregates.
void write_experiment_csv(const std::filesystem::path& path, const std::vector<ExperimentResult>& results);

}  // namespace azgan
