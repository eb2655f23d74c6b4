#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "motionmae/autodiff.hpp"
#include "motionmae/error.hpp"

namespace mmae {

// Builds a scalar loss on `tape` from one leaf per parameter tensor.
using LossBuilder = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

inline double evaluate_loss(const LossBuilder& f, std::span<const Tensor> params) {
  Tape tape(false);
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p));
  return tape.value(f(tape, leaves)).item();
}

// central:      [f(x+h) - f(x-h)] / 2h
// fourth_order: (8[f(x+h) - f(x-h)] - [f(x+2h) - f(x-2h)]) / 12h
enum class Stencil { central, fourth_order };

// Compares tape gradients with finite differences, coordinate by coordinate.
// Error per coordinate is |a - b| / max(|a|, |b|, 1e-8).
inline GradCheckResult finite_diff_check(const LossBuilder& f, std::vector<Tensor> params, double eps = 1e-6,
                                         Stencil stencil = Stencil::central) {
  if (!(eps > 0.0)) throw ConfigError("finite_diff_check: step must be positive");

  const double base = evaluate_loss(f, params);
  if (evaluate_loss(f, params) != base) throw ConfigError("finite_diff_check: loss function is not deterministic");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(tape.leaf(p));
    Var loss = f(tape, leaves);
    tape.backward(loss);
    for (Var l : leaves) analytic.push_back(tape.grad(l));
  }

  GradCheckResult res;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].numel(); ++i) {
      const double orig = params[p][i];
      auto at = [&](double delta) {
        params[p][i] = orig + delta;
        return evaluate_loss(f, params);
      };
      const double d1 = at(eps) - at(-eps);
      double numeric = d1 / (2.0 * eps);
      if (stencil == Stencil::fourth_order) numeric = (8.0 * d1 - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
      params[p][i] = orig;
      const double a = analytic[p][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = p;
        res.worst_index = i;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace mmae
