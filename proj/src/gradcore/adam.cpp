#include "refuseg/gradcore/adam.hpp"

#include <cmath>

namespace refuseg::grad {

void adam_step(TensorMap& params, AdamState& state, const ParamFilter& include) {
  require(state.lr > 0.0, ErrorKind::configuration, "adam: learning rate must be positive");
  for (auto& [name, p] : params) {
    if (!p.requires_grad || (include && !include(name))) continue;
    require(p.has_grad(), ErrorKind::contract, "adam: parameter '" + name + "' has no gradient");
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (auto& [name, p] : params) {
    if (!p.requires_grad || (include && !include(name))) continue;
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(p.data.size(), 0.0f);
    if (v.empty()) v.assign(p.data.size(), 0.0f);
    require(m.size() == p.data.size() && v.size() == p.data.size(), ErrorKind::contract,
            "adam: moment shape mismatch for '" + name + "'");
    for (size_t i = 0; i < p.data.size(); ++i) {
      const double g = p.grad[i];
      const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double step = state.lr * (mi / c1) / (std::sqrt(vi / c2) + state.eps);
      p.data[i] = static_cast<float>(p.data[i] - step);
    }
  }
}

void zero_grad(TensorMap& params) {
  for (auto& [name, p] : params) p.zero_grad();
}

}  // namespace refuseg::grad
