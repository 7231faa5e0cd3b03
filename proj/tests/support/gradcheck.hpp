#pragma once

#include <functional>
#include <random>
#include <vector>

#include "gavatar/tensor.hpp"

namespace gavatar::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;  // per input: max |analytic - numeric| / max(max |numeric|, floor)
  double max_abs_error = 0.0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `fn` must build its graph from the given leaves only.
GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                           std::vector<Tensor> inputs, double h = 1e-5, double floor = 1e-6);

/// Scalar projection sum(out * weights) with fixed random weights, so every
/// output element contributes a distinct gradient.
Tensor random_projection(const Tensor& out, std::uint64_t seed);

}  // namespace gavatar::testing
