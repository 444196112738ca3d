#pragma once

#include <cstdint>
#include <vector>

#include "pht/tensor.hpp"

namespace pht {

struct AdamConfig {
  double base_rate = 1.0;
  std::int64_t warmup_steps = 16000;
  std::size_t model_dim = 256;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-9;
};

// base_rate * model_dim^-1/2 * min(step^-1/2, step * warmup^-3/2); step >= 1.
double warmup_rate(const AdamConfig& config, std::int64_t step);

struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

AdamState make_adam_state(const AdamConfig& config, const std::vector<Tensor>& params);

// One bias-corrected Adam update with the warm-up rate. The step counter is
// incremented before the rate is computed.
void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads, AdamState& state);

// Same, reading each parameter's accumulated gradient.
void adam_step(std::vector<Tensor>& params, AdamState& state);

}  // namespace pht
