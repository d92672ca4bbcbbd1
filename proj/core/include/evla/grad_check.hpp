// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "evla/tensor.hpp"

namespace evla {

// A scalar function of a set of parameter tensors. `value` evaluates the
// function from the parameters' current data. `gradient` must leave
// d(value)/d(param) in each parameter's grad buffer; grad_check zeroes the
// buffers before calling it.
struct Differentiable {
  std::function<double()> value;
  std::function<void()> gradient;
};

struct GradCheckFailure {
  std::size_t param = 0;    // index into the params list
  std::size_t element = 0;  // flat element index
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::vector<GradCheckFailure> failures;

  bool passed() const { return failures.empty(); }
};

struct GradCheckOptions {
  double step = 1e-5;
  double tol = 1e-6;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor),
  // so gradients that are zero up to rounding compare as absolute error.
  double floor = 1e-8;
};

// Compares analytic gradients against central differences
// (f(x + h) - f(x - h)) / 2h element by element.
GradCheckReport grad_check(const Differentiable& f,
                           std::span<Tensor* const> params,
                           const GradCheckOptions& options = {});

}  // namespace evla
