// SPDX-License-Identifier: Apache-2.0

#include "evla/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "evla/error.hpp"

namespace evla {

GradCheckReport grad_check(const Differentiable& f,
                           std::span<Tensor* const> params,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0)) fail(ErrorKind::kConfig, "grad_check: step must be > 0");

  for (Tensor* p : params) p->zero_grad();
  f.gradient();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor* p : params) {
    analytic.emplace_back(p->grad().begin(), p->grad().end());
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double saved = p[i];
      p[i] = saved + options.step;
      const double plus = f.value();
      p[i] = saved - options.step;
      const double minus = f.value();
      p[i] = saved;

      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[pi][i];
      const double denom =
          std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      report.max_rel_error = std::max(report.max_rel_error, rel);
      ++report.checked;
      if (!(rel < options.tol)) {
        report.failures.push_back({pi, i, a, numeric, rel});
      }
    }
  }
  return report;
}

}  // namespace evla
