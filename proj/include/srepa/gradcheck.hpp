#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "srepa/tape.hpp"

namespace srepa {

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  double step_size = 0.0;
  bool passed = false;
  std::string diagnostic;
};

// A scalar function of a list of leaves, evaluated on a caller-provided tape.
using CheckedFn = std::function<Var<double>(Tape<double>&,
                                            const std::vector<Var<double>>&)>;

// Central-difference check of reverse-mode gradients, 64-bit only.
inline GradCheckReport grad_check(const std::string& op_name, const CheckedFn& fn,
                                  const std::vector<Tensor<double>>& point,
                                  double step = 1e-3, double tol = 1e-3) {
  GradCheckReport report;
  report.op_name = op_name;
  report.step_size = step;

  auto eval = [&](const std::vector<Tensor<double>>& p,
                  std::vector<Tensor<double>>* grads_out) -> double {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    leaves.reserve(p.size());
    for (const auto& t : p) leaves.push_back(make_leaf(tape, t));
    Var<double> y = fn(tape, leaves);
    if (!y.value().is_scalar())
      throw std::invalid_argument("grad_check: function must return a scalar");
    if (grads_out) {
      tape.backward(y.id);
      grads_out->clear();
      for (const auto& l : leaves) grads_out->push_back(l.grad());
    }
    return y.value().scalar();
  };

  std::vector<Tensor<double>> analytic;
  try {
    eval(point, &analytic);
  } catch (const std::exception& e) {
    report.diagnostic = std::string("evaluation failed: ") + e.what();
    return report;
  }

  // Error is relative to the component pair, floored by a small fraction of
  // the largest gradient component: near-zero components otherwise amplify
  // finite-difference truncation noise into spurious failures.
  double grad_scale = 0.0;
  for (const auto& g : analytic)
    for (double v : g.data) grad_scale = std::max(grad_scale, std::fabs(v));

  double max_rel = 0.0;
  try {
    for (std::size_t li = 0; li < point.size(); ++li) {
      for (std::size_t k = 0; k < point[li].data.size(); ++k) {
        auto plus = point;
        auto minus = point;
        plus[li].data[k] += step;
        minus[li].data[k] -= step;
        const double numeric =
            (eval(plus, nullptr) - eval(minus, nullptr)) / (2.0 * step);
        const double a = analytic[li].data[k];
        if (!std::isfinite(numeric) || !std::isfinite(a)) {
          report.diagnostic = "non-finite gradient at leaf " +
                              std::to_string(li) + " coord " +
                              std::to_string(k);
          return report;
        }
        const double denom = std::max(
            {std::fabs(a), std::fabs(numeric), 0.01 * grad_scale, 1e-8});
        max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
      }
    }
  } catch (const std::exception& e) {
    report.diagnostic = std::string("perturbed evaluation failed: ") + e.what();
    return report;
  }

  report.max_rel_error = max_rel;
  report.passed = max_rel < tol;
  return report;
}

}  // namespace srepa
