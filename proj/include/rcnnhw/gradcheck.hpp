// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "rcnnhw/autodiff.hpp"
#include "rcnnhw/errors.hpp"

namespace rcnnhw {

/// Builds a scalar from a differentiable input on the given tape.
using ScalarFn = std::function<Var(Tape&, Var)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the reverse-mode gradient of `f` at `x` with central differences.
///
/// Each coordinate is perturbed by h = epsilon * max(1, |x_i|). The error of a
/// coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) and
/// the maximum over coordinates is returned. Throws CheckFailure naming the
/// coordinate if f is non-finite at any evaluated point.
inline GradCheckResult finite_diff_check(const ScalarFn& f, const Tensor& x,
                                         double epsilon = 1e-5) {
  auto eval = [&](const Tensor& at, std::size_t coord) {
    Tape tape(false);
    Var out = f(tape, tape.constant(at));
    if (out.value().size() != 1) {
      throw ContractError("finite_diff_check: f must return a scalar");
    }
    const double v = out.value()[0];
    if (!std::isfinite(v)) {
      throw CheckFailure("finite_diff_check: non-finite f at coordinate " +
                         std::to_string(coord));
    }
    return v;
  };

  Tensor analytic;
  {
    Tape tape;
    Var in = tape.leaf(x);
    Var out = f(tape, in);
    if (!std::isfinite(out.value()[0])) {
      throw CheckFailure("finite_diff_check: non-finite f at the base point");
    }
    tape.backward(out);
    const Tensor* g = tape.grad(in.id());
    analytic = g ? *g : Tensor(x.shape());
  }

  GradCheckResult result;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double h = epsilon * std::max(1.0, std::abs(x[i]));
    probe[i] = x[i] + h;
    const double up = eval(probe, i);
    probe[i] = x[i] - h;
    const double down = eval(probe, i);
    probe[i] = x[i];
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[i];
    const double err =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (err > result.max_rel_error || i == 0) {
      result = {err, i, a, numeric};
    }
  }
  return result;
}

/// Same check with respect to a parameter used by `loss`. The parameter is
/// perturbed in place and restored; its gradient buffer is overwritten.
inline GradCheckResult finite_diff_check(const std::function<Var(Tape&)>& loss, Parameter& p,
                                         double epsilon = 1e-5) {
  auto eval = [&](std::size_t coord) {
    Tape tape(false);
    const double v = loss(tape).value()[0];
    if (!std::isfinite(v)) {
      throw CheckFailure("finite_diff_check: non-finite loss at coordinate " +
                         std::to_string(coord));
    }
    return v;
  };
  Tensor analytic;
  {
    p.zero_grad();
    Tape tape;
    Var out = loss(tape);
    if (out.value().size() != 1) throw ContractError("finite_diff_check: loss must be scalar");
    if (!std::isfinite(out.value()[0])) {
      throw CheckFailure("finite_diff_check: non-finite loss at the base point");
    }
    tape.backward(out);
    analytic = p.grad;
  }
  GradCheckResult result;
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double x = p.value[i];
    const double h = epsilon * std::max(1.0, std::abs(x));
    p.value[i] = x + h;
    const double up = eval(i);
    p.value[i] = x - h;
    const double down = eval(i);
    p.value[i] = x;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[i];
    const double err =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (err > result.max_rel_error || i == 0) result = {err, i, a, numeric};
  }
  return result;
}

}  // namespace rcnnhw
