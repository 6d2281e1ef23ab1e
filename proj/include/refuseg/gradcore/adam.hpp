#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "refuseg/gradcore/tensor.hpp"

namespace refuseg::grad {

struct AdamState {
  int64_t step_count = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // First and second moments keyed by parameter name, created on first update.
  std::map<std::string, std::vector<float>> m;
  std::map<std::string, std::vector<float>> v;
};

using ParamFilter = std::function<bool(const std::string&)>;

// One bias-corrected Adam update over every trainable tensor accepted by
// `include` (all of them when empty). Gradients are left untouched.
// Throws ErrorKind::contract when an included parameter has no gradient.
void adam_step(TensorMap& params, AdamState& state, const ParamFilter& include = {});

void zero_grad(TensorMap& params);

}  // namespace refuseg::grad
