#pragma once

// Central finite-difference checks in double precision. Only forward values
// are used on the numeric side, so the check is independent of the backward
// rules it validates.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mat/ops.hpp"
#include "mat/rng.hpp"

namespace mat {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double tolerance = 1e-5;
  /// Step is step_scale * max(1, |theta|).
  double step_scale = 1e-4;
  /// Check at most this many coordinates per input (0 = all).
  std::size_t max_coords = 0;
  std::uint64_t seed = 1;
};

/// Relative error with a unit floor on the denominator, so that near-zero
/// gradients are compared in absolute terms.
inline double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

/// `loss` maps the given inputs to a scalar. Inputs are made trainable,
/// differentiated on a fresh tape, then compared against central differences.
inline GradCheckResult check_gradients(
    const std::string& name, std::vector<Tensor<double>> inputs,
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& loss,
    const GradCheckOptions& opt = {}) {
  GradCheckResult res;
  res.name = name;
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto out = loss(inputs);
    tape.backward(out);
  }
  auto eval = [&] {
    NoTapeScope<double> none;
    return loss(inputs).item();
  };
  CounterRng rng(opt.seed);
  for (auto& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords > 0 && coords.size() > opt.max_coords) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(opt.max_coords);
    }
    auto vals = t.values();
    for (auto i : coords) {
      const double orig = vals[i];
      const double h = opt.step_scale * std::max(1.0, std::abs(orig));
      vals[i] = orig + h;
      const double up = eval();
      vals[i] = orig - h;
      const double down = eval();
      vals[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      res.max_rel_error = std::max(res.max_rel_error, grad_rel_error(analytic[i], numeric));
      ++res.checked;
    }
  }
  res.passed = res.max_rel_error < opt.tolerance && std::isfinite(res.max_rel_error);
  return res;
}

/// Random tensor with entries uniform in [lo, hi).
inline Tensor<double> random_tensor(CounterRng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

}  // namespace mat
