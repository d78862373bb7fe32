#pragma once

#include "azgan/tensor.hpp"

namespace azgan {

struct RmsPropOptions {
  double learning_rate = 5e-5;
  double decay = 0.9;
  double epsilon = 1e-8;
};

/// Root-mean-square propagation statistics, one accumulator per parameter.
struct OptimizerState {
  RmsPropOptions options;
  std::vector<Eigen::VectorXd> accumulators;

  OptimizerState() = default;
  explicit OptimizerState(RmsPropOptions opts) : options(opts) {}
};

/// Allocates zeroed gradients on every parameter.
void zero_grad(const ParameterList& params);

/// acc <- decay*acc + (1-decay)*g^2; p <- p - lr*g/(sqrt(acc)+eps); then
/// zeroes the gradients. Throws ContractError when a parameter has no
/// gradient.
void optimizer_step(const ParameterList& params, OptimizerState& state);

}  // namespace azgan
