#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gavatar/tensor.hpp"

namespace gavatar {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;
  double weight_decay = 1e-3;
};

/// Parameters sharing one learning rate and one decay switch.
struct ParamGroup {
  std::string name;
  std::vector<Tensor> params;
  double lr = 1e-3;
  bool decay = false;
};

/// AdamW with bias correction and decoupled weight decay, applied per group.
class AdamW {
 public:
  explicit AdamW(std::vector<ParamGroup> groups, AdamWConfig config = {});

  /// Applies one update from the gradients currently stored on the params.
  /// Parameters without a gradient are treated as having a zero gradient.
  void step();
  void zero_grad();

  std::int64_t step_count() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  std::vector<ParamGroup>& groups() { return groups_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }

  /// Moment buffers in group/param order (for checkpointing).
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  void set_step_count(std::int64_t step) { step_ = step; }

 private:
  std::vector<ParamGroup> groups_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t step_ = 0;
};

/// Stateless single-tensor update used by the optimizer; exposed for tests.
void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                  std::span<double> v, std::int64_t step, double lr, bool decay,
                  const AdamWConfig& config);

}  // namespace gavatar
