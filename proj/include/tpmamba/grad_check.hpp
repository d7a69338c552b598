#pragma once

#include "tpmamba/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace tpmamba {

struct GradCheckOptions {
  double step = 1e-4;
  /// Coordinates probed per parameter; smaller tensors are checked exhaustively.
  Index samples_per_parameter = 12;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  Index coordinates_checked = 0;
  Index parameters_checked = 0;
};

/// Compares reverse-mode gradients of the scalar `loss_fn()` with central
/// differences. Error per coordinate is |a - n| / max(1, |a|, |n|).
/// Frozen parameters are skipped and must not have received a gradient.
template <typename LossFn>
GradCheckResult grad_check(LossFn&& loss_fn, const ParameterList<double>& params,
                           const GradCheckOptions& opt = {}) {
  zero_grad(params);
  Tape<double> tape;
  Var<double> loss;
  {
    TapeScope<double> scope(tape);
    loss = loss_fn();
  }
  if (!std::isfinite(loss.value()[0])) throw NumericError("grad_check: non-finite loss");
  tape.backward(loss);

  auto evaluate = [&]() {
    NoGradScope<double> off;
    const double v = loss_fn().value()[0];
    return v;
  };

  std::mt19937_64 rng(opt.seed);
  GradCheckResult result;
  for (Parameter<double>* p : params) {
    if (!p->trainable) {
      if (p->var.has_grad()) throw NumericError("grad_check: frozen parameter " + p->name + " received a gradient");
      continue;
    }
    Tensor<double>& value = p->value();
    const Tensor<double> analytic = p->var.has_grad() ? p->var.grad() : Tensor<double>(value.shape());
    for (Index i = 0; i < analytic.size(); ++i) {
      if (!std::isfinite(analytic[i])) throw NumericError("grad_check: non-finite gradient in " + p->name);
    }
    std::vector<Index> coords(value.size());
    std::iota(coords.begin(), coords.end(), Index{0});
    if (static_cast<Index>(coords.size()) > opt.samples_per_parameter) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.samples_per_parameter);
    }
    for (Index c : coords) {
      const double orig = value[c];
      value[c] = orig + opt.step;
      const double up = evaluate();
      value[c] = orig - opt.step;
      const double down = evaluate();
      value[c] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: non-finite loss while perturbing " + p->name);
      }
      const double numeric = (up - down) / (2 * opt.step);
      const double a = analytic[c];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err >= result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_parameter = p->name;
      }
      ++result.coordinates_checked;
    }
    ++result.parameters_checked;
  }
  zero_grad(params);
  return result;
}

}  // namespace tpmamba
