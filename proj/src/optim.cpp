#include "pht/optim.hpp"

#include <algorithm>
#include <cmath>

#include "pht/errors.hpp"

namespace pht {

double warmup_rate(const AdamConfig& config, std::int64_t step) {
  if (step < 1) throw ContractError("warmup_rate: step must be >= 1");
  if (config.warmup_steps < 1) throw ContractError("warmup_rate: warmup_steps must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(config.warmup_steps);
  const double schedule = std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
  return config.base_rate * schedule / std::sqrt(static_cast<double>(config.model_dim));
}

AdamState make_adam_state(const AdamConfig& config, const std::vector<Tensor>& params) {
  AdamState state;
  state.config = config;
  for (const Tensor& p : params) {
    state.first_moment.emplace_back(p.numel(), 0.0);
    state.second_moment.emplace_back(p.numel(), 0.0);
  }
  return state;
}

void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads, AdamState& state) {
  if (grads.size() != params.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters, " +
                         std::to_string(grads.size()) + " gradients, " +
                         std::to_string(state.first_moment.size()) + " moment slots");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t n = params[i].numel();
    if (grads[i].size() != n || state.first_moment[i].size() != n || state.second_moment[i].size() != n) {
      throw DimensionError("adam_step: parameter " + std::to_string(i) + " of shape " +
                           shape_str(params[i].shape()) + " does not match gradient/moment sizes");
    }
  }

  state.step += 1;
  const AdamConfig& c = state.config;
  const double rate = warmup_rate(c, state.step);
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      data[j] -= rate * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

void adam_step(std::vector<Tensor>& params, AdamState& state) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const Tensor& p : params) {
    if (p.has_grad()) {
      grads.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      grads.emplace_back(p.numel(), 0.0);
    }
  }
  adam_step(params, grads, state);
}

}  // namespace pht
