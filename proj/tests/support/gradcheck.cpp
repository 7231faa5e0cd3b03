#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "gavatar/ops.hpp"

namespace gavatar::testing {

GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                           std::vector<Tensor> inputs, double h, double floor) {
  for (auto& t : inputs) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  const Tensor loss = fn(inputs);
  backward(loss);
  GradCheckResult result;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(static_cast<std::size_t>(t.numel()), 0.0);
    std::vector<double> numeric(analytic.size());
    auto values = t.mutable_values();
    {
      NoGradGuard guard;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double orig = values[i];
        values[i] = orig + h;
        const double up = fn(inputs).item();
        values[i] = orig - h;
        const double down = fn(inputs).item();
        values[i] = orig;
        numeric[i] = (up - down) / (2.0 * h);
      }
    }
    double scale = floor;
    double max_abs = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      scale = std::max(scale, std::abs(numeric[i]));
      max_abs = std::max(max_abs, std::abs(analytic[i] - numeric[i]));
    }
    result.max_abs_error = std::max(result.max_abs_error, max_abs);
    result.max_rel_error = std::max(result.max_rel_error, max_abs / scale);
  }
  return result;
}

Tensor random_projection(const Tensor& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor w = Tensor::uniform(out.shape(), rng, -1.0, 1.0);
  return ops::sum(ops::mul(out, w));
}

}  // namespace gavatar::testing
