#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "sgdsc/tensor.hpp"

namespace sgdsc {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  bool passed = true;
};

/// Compares backward() against central differences (f(x+h) - f(x-h)) / 2h.
///
/// Entry error is |a - n| / max(1, |a|, |n|): relative for gradients of unit
/// size or larger, absolute below that. Float32 central differences carry
/// roughly eps * |f| / h of rounding noise, which a floor-free ratio would
/// amplify without bound on near-zero entries.
///
/// `f` must read the current values of `inputs`; they are perturbed in place
/// and restored.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs, double h = 1e-3,
                                  double tol = 1e-3) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor y = f();
  if (y.numel() != 1) throw ShapeError("grad_check: function must return a scalar, got " + shape_str(y.shape()));
  backward(y);

  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& t = inputs[k];
    const std::vector<float> analytic = t.has_grad() ? std::vector<float>(t.grad().begin(), t.grad().end())
                                                     : std::vector<float>(t.numel(), 0.0f);
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const float saved = data[i];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard guard;
        data[i] = static_cast<float>(saved + h);
        plus = f().item();
        data[i] = static_cast<float>(saved - h);
        minus = f().item();
      }
      data[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({1.0, std::abs(a), std::abs(numeric)});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error || report.checked == 0) {
        report.max_rel_error = rel;
        report.worst_input = k;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
      ++report.checked;
    }
    t.zero_grad();
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

/// Single-input form: f maps x to a scalar.
inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-3,
                                  double tol = 1e-3) {
  std::vector<Tensor> inputs{x.detach()};
  Tensor& leaf = inputs[0];
  return grad_check([&] { return f(leaf); }, std::span<Tensor>(inputs), h, tol);
}

}  // namespace sgdsc
