#pragma once

#include "azgan/ops.hpp"
#include "azgan/random.hpp"

#include <string>
#include <vector>

namespace azgan {

struct NamedStats {
  std::string name;
  BatchNormStats stats;
};

/// Parameters and batch-norm buffers of one network, in creation order.
class Network {
 public:
  const ParameterList& parameters() const { return params_; }
  std::vector<NamedStats>& norm_stats() { return stats_; }
  const std::vector<NamedStats>& norm_stats() const { return stats_; }
  Index parameter_count() const;

  /// Names of the ops a forward pass records, for structural checks.
  std::vector<std::string> traced_ops(const std::vector<Tensor>& inputs);

 protected:
  struct Conv {
    std::size_t weight = 0;
    std::size_t bias = SIZE_MAX;  // none when followed by batch norm
    Conv2dOptions options;
  };
  struct Norm {
    std::size_t gamma = 0, beta = 0, stats = 0;
  };

  Conv add_conv(const std::string& name, Index in, Index out, Index kernel, Conv2dOptions opt, bool bias, Rng& rng,
                double init_std = 0.02);
  Norm add_norm(const std::string& name, Index channels);
  std::size_t add_vector(const std::string& name, Index n, Rng& rng);

  Tensor apply(Tape& tape, const Conv& conv, const Tensor& x) const;
  Tensor apply(Tape& tape, const Norm& norm, const Tensor& x, Mode mode);
  const Tensor& param(std::size_t i) const { return params_[i].tensor; }

  virtual std::vector<Tensor> trace_forward(Tape& tape, const std::vector<Tensor>& inputs) = 0;

  ParameterList params_;
  std::vector<NamedStats> stats_;
};

struct GeneratorSpec {
  Index input_size = 32;
  std::vector<Index> input_channels = {16, 32};  // conv stages of each input block
  int input_residual_blocks = 2;
  int fuse_residual_blocks = 3;  // at twice the last input width
  std::vector<Index> map_channels = {32};  // hidden stages before the 1-channel output
  double lrelu_alpha = 0.2;

  void validate() const;
};

/// Two parallel input blocks with separate weights, channel concatenation,
/// a residual fusion block and a mapping block ending in tanh.
class Generator : public Network {
 public:
  Generator(const GeneratorSpec& spec, Rng& rng);

  /// I1, I2: [B,1,S,S]. Returns [B,1,S,S] in (-1,1).
  Tensor forward(Tape& tape, const Tensor& i1, const Tensor& i2, Mode mode);
  const GeneratorSpec& spec() const { return spec_; }

 private:
  struct Residual {
    Conv c1, c2;
    Norm n1, n2;
  };
  struct Stage {
    Conv conv;
    Norm norm;
  };
  struct InputBlock {
    std::vector<Stage> stages;
    std::vector<Residual> residuals;
  };

  Residual make_residual(const std::string& name, Index channels, Rng& rng);
  Tensor run(Tape& tape, const Stage& s, const Tensor& x, Mode mode);
  Tensor run(Tape& tape, const Residual& r, const Tensor& x, Mode mode);
  Tensor run(Tape& tape, const InputBlock& b, const Tensor& x, Mode mode);
  std::vector<Tensor> trace_forward(Tape& tape, const std::vector<Tensor>& inputs) override;

  GeneratorSpec spec_;
  InputBlock pi1_, pi2_;
  std::vector<Residual> fuse_;
  std::vector<Stage> map_;
  Conv out_;
};

struct CriticSpec {
  Index input_size = 32;
  std::vector<Index> channels = {16, 32, 64};
  std::vector<Index> strides = {2, 2, 2};
  double lrelu_alpha = 0.2;
  bool use_deformable = false;
  /// Stage index made deformable when use_deformable; -1 picks the middle.
  int deformable_stage = -1;
  double clip_bound = 0.01;

  void validate() const;
  Index final_extent() const;
};

/// Strided conv / batch-norm / lrelu stages, then a bias-free vector product
/// producing one unbounded real per item. With use_deformable one stage
/// samples through offsets predicted by a parallel plain convolution.
class Critic : public Network {
 public:
  Critic(const CriticSpec& spec, Rng& rng);

  /// [B,1,S,S] -> [B,1].
  Tensor forward(Tape& tape, const Tensor& image, Mode mode);
  const CriticSpec& spec() const { return spec_; }
  int deformable_stage() const { return deform_stage_; }
  /// Parameters of the offset-producing convolution (empty without one).
  ParameterList offset_parameters() const;

 private:
  struct Stage {
    Conv conv;
    Conv offset;  // used only by the deformable stage
    Norm norm;
  };
  std::vector<Tensor> trace_forward(Tape& tape, const std::vector<Tensor>& inputs) override;

  CriticSpec spec_;
  std::vector<Stage> stages_;
  int deform_stage_ = -1;
  std::size_t head_ = 0;
};

/// Clamps every parameter into [-bound, bound].
void clip_weights(const ParameterList& params, double bound);

/// Largest absolute parameter value.
double max_abs_parameter(const ParameterList& params);

}  // namespace azgan
