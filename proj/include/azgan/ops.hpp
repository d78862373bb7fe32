#pragma once

#include "azgan/tensor.hpp"

#include <span>

namespace azgan {

enum class Mode { kTrain, kEval };

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
};

/// Output extent of a strided convolution or pooling window along one axis.
Index conv_out_extent(Index in, Index kernel, Index stride, Index padding);

/// 2-d cross-correlation over NCHW input with a [Cout,Cin,kh,kw] kernel.
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              Conv2dOptions options = {});

/// Convolution whose sampling grid is displaced per output position.
///
/// `offsets` is [B, 2*kh*kw, H', W']; channel 2t holds the row displacement
/// and 2t+1 the column displacement of kernel tap t = i*kw + j. Samples are
/// bilinear and read zero outside the input. With all offsets zero the
/// result is identical to conv2d without bias.
Tensor deformable_conv2d(Tape& tape, const Tensor& input, const Tensor& kernel,
                         const Tensor& offsets, Conv2dOptions options = {});

/// Running per-channel statistics used by batch_norm in eval mode.
struct BatchNormStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
  BatchNormStats() = default;
  explicit BatchNormStats(Index channels)
      : mean(Eigen::VectorXd::Zero(channels)), var(Eigen::VectorXd::Ones(channels)) {}
};

struct BatchNormOptions {
  double epsilon = 1e-5;
  double momentum = 0.9;  // weight of the previous running value
  bool update_running = true;
};

Tensor batch_norm(Tape& tape, const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  BatchNormStats& stats, Mode mode, BatchNormOptions options = {});

/// x for x > 0, alpha*x otherwise. The derivative at 0 is alpha.
Tensor lrelu(Tape& tape, const Tensor& x, double alpha);
Tensor tanh(Tape& tape, const Tensor& x);

/// Max over square windows; ties go to the first cell in row-major order.
Tensor maxpool2d(Tape& tape, const Tensor& input, Index window, Index stride);

/// Row-wise dot product of a [B, ...] input (flattened per row) with an [N]
/// weight vector. No bias.
Tensor linear(Tape& tape, const Tensor& input, const Tensor& weight);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
inline Tensor residual_add(Tape& tape, const Tensor& block_input, const Tensor& block_output) {
  return add(tape, block_input, block_output);
}
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
Tensor abs(Tape& tape, const Tensor& x);
/// log(1 / (1 + exp(-x))) in a form that stays finite for any x.
Tensor log_sigmoid(Tape& tape, const Tensor& x);
/// Clamps into [lo, hi]; gradient passes unchanged inside, zero outside.
Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
/// [B, ...] -> [B, N].
Tensor flatten(Tape& tape, const Tensor& x);

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);
Tensor concat_batch(Tape& tape, const Tensor& a, const Tensor& b);
Tensor slice_batch(Tape& tape, const Tensor& x, Index begin, Index count);

/// Mean softmax cross-entropy of [B, C] logits against class indices.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels);

}  // namespace azgan
