#include "azgan/optimizer.hpp"

#include "azgan/errors.hpp"

namespace azgan {

void zero_grad(const ParameterList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

void optimizer_step(const ParameterList& params, OptimizerState& state) {
  if (state.accumulators.empty()) {
    state.accumulators.reserve(params.size());
    for (const auto& p : params) state.accumulators.push_back(Eigen::VectorXd::Zero(p.tensor.numel()));
  }
  if (state.accumulators.size() != params.size()) {
    throw ContractError("optimizer state holds " + std::to_string(state.accumulators.size()) +
                        " accumulators for " + std::to_string(params.size()) + " parameters");
  }
  const RmsPropOptions& o = state.options;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    if (!t.has_grad()) throw ContractError("optimizer_step: parameter '" + params[i].name + "' has no gradient");
    Eigen::VectorXd& acc = state.accumulators[i];
    if (acc.size() != t.numel()) {
      throw ContractError("optimizer_step: accumulator shape mismatch for '" + params[i].name + "'");
    }
    const Eigen::VectorXd& g = t.grad();
    acc = o.decay * acc + (1.0 - o.decay) * g.cwiseAbs2();
    t.values().array() -= o.learning_rate * g.array() / (acc.array().sqrt() + o.epsilon);
    t.zero_grad();
  }
}

}  // namespace azgan
