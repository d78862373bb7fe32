#pragma once

#include "azgan/formation.hpp"
#include "azgan/networks.hpp"
#include "azgan/optimizer.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

namespace azgan {

struct TrainConfig {
  int critic_updates_per_gen = 25;
  double clip_bound = 0.01;
  double azimuth_loss_weight = 1.0;
  int batch_size = 8;
  int max_generator_updates = 2000;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;  // generator updates; 0 disables
  /// Combinations whose fakes are generated once per generator cycle and
  /// shared by its critic iterations; 0 runs the generator every iteration.
  int fake_pool_size = 32;
  RmsPropOptions generator_optimizer;
  RmsPropOptions discriminator_optimizer;
  RmsPropOptions predictor_optimizer;

  void validate() const;
};

struct NetworkConfig {
  GeneratorSpec generator;
  CriticSpec discriminator;
  CriticSpec predictor{32, {16, 32, 64}, {2, 2, 2}, 0.2, true, -1, 0.01};
};

struct LossReport {
  std::int64_t iteration = 0;  // critic iterations completed
  double l_do = 0.0;
  double l_da = 0.0;
  double l_g = 0.0;
  double score_real = 0.0;
  double score_fake = 0.0;
};

/// One combination prepared for training: centred crops scaled by their
/// peak intensity into [0,1].
struct TrainingExample {
  Image input_a;
  Image input_b;
  std::vector<Image> reals;
  double target_azimuth_deg = 0.0;
  int class_id = 0;
};

/// Centred crop to `size` divided by its maximum. Values land in [0,1], inside
/// the generator's tanh range, with the background at 0 so that zero padding
/// matches it.
Image to_network_range(const Image& pixels, Index size);

std::vector<TrainingExample> make_examples(const std::vector<LabeledImage>& images,
                                           const std::vector<Combination>& combos, Index size);

/// Stacks S x S images into a [B,1,S,S] tensor.
Tensor stack_images(const std::vector<const Image*>& images);
Image tensor_image(const Tensor& batch, Index item);

struct ModelState {
  ModelState(const NetworkConfig& networks, const TrainConfig& train);

  NetworkConfig networks;
  Generator generator;
  Critic discriminator;
  Critic predictor;
  OptimizerState generator_opt;
  OptimizerState discriminator_opt;
  OptimizerState predictor_opt;
  std::int64_t iteration = 0;
  std::int64_t generator_updates = 0;
  std::uint64_t seed = 0;
  Rng rng;
  std::vector<std::size_t> order;  // current epoch permutation
  std::size_t cursor = 0;
};

/// -(mean log s(real) + mean log(1 - s(fake))) over scores clamped to +-50.
Tensor loss_discriminator(Tape& tape, const Tensor& real_scores, const Tensor& fake_scores);
/// mean |predicted - target|.
Tensor loss_predictor(Tape& tape, const Tensor& predicted, const Tensor& target);
/// mean log(1 - s(fake)) + weight * mean |predicted - target|; the azimuth
/// term is omitted when weight is 0.
Tensor loss_generator(Tape& tape, const Tensor& fake_scores, const Tensor& predicted, const Tensor& target,
                      double weight);

/// Next `count` combination indices from the per-epoch shuffled order.
std::vector<std::size_t> next_batch(ModelState& state, std::size_t examples, std::size_t count);

/// Observer of every critic update (for invariant checks).
using CriticHook = std::function<void(const ModelState&)>;

/// critic_updates_per_gen critic iterations followed by one generator update.
LossReport train_step(ModelState& state, const std::vector<TrainingExample>& examples, const TrainConfig& config,
                      const CriticHook& after_critic = {});

struct TrainOutputs {
  std::vector<LossReport> reports;
  std::vector<std::filesystem::path> checkpoints;
};

/// Runs until state.generator_updates reaches max_generator_updates.
/// Checkpoints go to `checkpoint_dir` (skipped when empty).
TrainOutputs train_loop(ModelState& state, const std::vector<TrainingExample>& examples, const TrainConfig& config,
                        const std::filesystem::path& checkpoint_dir = {}, const CriticHook& after_critic = {});

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossReport>& reports);

void save_checkpoint(const std::filesystem::path& path, const ModelState& state);
/// Restores into a state built with the same network configuration.
void load_checkpoint(const std::filesystem::path& path, ModelState& state);

/// Generator output for each example, in eval mode, clamped to nonnegative
/// intensities.
std::vector<Image> generate_images(ModelState& state, const std::vector<TrainingExample>& examples,
                                   std::size_t batch = 16);

}  // namespace azgan
