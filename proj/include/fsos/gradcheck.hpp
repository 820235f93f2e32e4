#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fsos/autodiff.hpp"

namespace fsos {

// Builds a scalar loss on `tape` from leaves bound to the parameters (same order as passed in).
using ScalarFn = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

namespace detail {

inline double eval_scalar(const ScalarFn& f, const std::vector<Tensor>& params, bool track,
                          std::vector<Tensor>* grads) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(tape.leaf(p, track));
  Var loss = f(tape, leaves);
  const double v = loss.value().item();
  if (!std::isfinite(v)) throw NumericError("gradient_check: loss is not finite");
  if (grads) {
    tape.backward(loss);
    grads->clear();
    for (Var leaf : leaves) grads->push_back(tape.grad(leaf));
  }
  return v;
}

}  // namespace detail

// Compares reverse-mode gradients against central differences, coordinate by coordinate.
// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
inline GradCheckResult gradient_check(const ScalarFn& f, std::vector<Tensor> params, double epsilon = 1e-5) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw DomainError("gradient_check: epsilon must lie in [1e-7, 1e-3], got " + std::to_string(epsilon));
  }
  std::vector<Tensor> analytic;
  detail::eval_scalar(f, params, true, &analytic);

  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double saved = params[p][i];
      params[p][i] = saved + epsilon;
      const double up = detail::eval_scalar(f, params, false, nullptr);
      params[p][i] = saved - epsilon;
      const double down = detail::eval_scalar(f, params, false, nullptr);
      params[p][i] = saved;

      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[p][i];
      if (!std::isfinite(a) || !std::isfinite(numeric)) throw NumericError("gradient_check: non-finite gradient");
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      ++result.coordinates;
      if (err > result.max_rel_error || result.coordinates == 1) {
        result.max_rel_error = err;
        result.worst_param = p;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace fsos
