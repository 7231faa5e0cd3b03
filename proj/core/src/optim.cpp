#include "gavatar/optim.hpp"

#include <cmath>

namespace gavatar {

void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                  std::span<double> v, std::int64_t step, double lr, bool decay,
                  const AdamWConfig& config) {
  if (!grad.empty() && grad.size() != param.size()) {
    throw ShapeError("adamw: gradient size " + std::to_string(grad.size()) +
                     " does not match parameter size " + std::to_string(param.size()));
  }
  if (m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adamw: moment buffers do not match parameter size");
  }
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  const double shrink = decay ? 1.0 - lr * config.weight_decay : 1.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : grad[i];
    if (!std::isfinite(g)) throw NumericalError("adamw: non-finite gradient");
    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
    v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    param[i] = param[i] * shrink - lr * mhat / (std::sqrt(vhat) + config.eps);
  }
}

AdamW::AdamW(std::vector<ParamGroup> groups, AdamWConfig config)
    : groups_(std::move(groups)), config_(config) {
  for (const auto& g : groups_) {
    for (const auto& p : g.params) {
      if (!p.is_leaf()) throw ConfigError("adamw: parameter in group '" + g.name + "' is not a leaf");
      m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
      v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }
  }
}

void AdamW::step() {
  ++step_;
  std::size_t slot = 0;
  for (auto& g : groups_) {
    for (auto& p : g.params) {
      auto& impl = *p.impl();
      adamw_update(impl.value, impl.grad, m_[slot], v_[slot], step_, g.lr, g.decay, config_);
      ++slot;
    }
  }
}

void AdamW::zero_grad() {
  for (auto& g : groups_) {
    for (auto& p : g.params) p.zero_grad();
  }
}

}  // namespace gavatar
