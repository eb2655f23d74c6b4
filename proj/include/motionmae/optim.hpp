#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "motionmae/error.hpp"
#include "motionmae/tensor.hpp"

namespace mmae {

struct AdamWHyper {
  double lr = 1.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// First/second moments per parameter plus the step counter.
struct OptimState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;

  static OptimState zeros_like(std::span<const Tensor> params) {
    OptimState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.shape());
      s.v.emplace_back(p.shape());
    }
    return s;
  }
};

// One bias-corrected AdamW step with decoupled weight decay. `decay` selects
// which parameters receive weight decay; empty means all of them.
inline void adamw_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimState& state,
                       const AdamWHyper& h, std::span<const bool> decay = {}) {
  if (!(h.beta1 >= 0.0 && h.beta1 < 1.0 && h.beta2 >= 0.0 && h.beta2 < 1.0))
    throw ConfigError("adamw: betas must lie in [0, 1)");
  if (grads.size() != params.size()) throw ConfigError("adamw: gradient count does not match parameter count");
  if (!decay.empty() && decay.size() != params.size()) throw ConfigError("adamw: decay mask size mismatch");
  if (state.m.empty() && state.v.empty() && state.t == 0) state = OptimState::zeros_like(params);
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ConfigError("adamw: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (grads[i].shape() != params[i].shape() || state.m[i].shape() != params[i].shape() ||
        state.v[i].shape() != params[i].shape())
      throw ConfigError("adamw: shape mismatch for parameter " + std::to_string(i));

  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const double wd = decay.empty() || decay[i] ? h.weight_decay : 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] = p[j] - h.lr * wd * p[j];
      m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
      v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] = p[j] - h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

}  // namespace mmae
