#pragma once

#include "azgan/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace azgan {

/// Scalar-valued function of one tensor, built on the given tape.
using ScalarFunction = std::function<Tensor(Tape&, const Tensor&)>;

/// Largest coordinate-wise relative error between the taped gradient of `f`
/// at `point` and central differences with step `h`:
/// |analytic - central| / max(|analytic|, |central|, 1e-8).
double finite_difference_check(const ScalarFunction& f, const Tensor& point, double h = 1e-5);

struct GradCheckResult {
  std::string name;
  double max_relative_error = 0.0;
  bool passed = false;
};

/// Runs the finite-difference check over every primitive (each differentiable
/// argument separately) and `composites` random layer stacks of depth 1..5.
std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed, int composites = 5,
                                                double tolerance = 1e-4);

}  // namespace azgan
