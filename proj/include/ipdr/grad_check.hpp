#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ipdr/autodiff.hpp"

namespace ipdr {

struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t components = 0;
};

struct GradCheckOptions {
  double eps = 1e-5;
  // Relative error denominator is max(|analytic|, |numeric|, floor); keeps
  // components whose true gradient is ~0 from reporting noise as error.
  double floor = 1e-5;
  // Check at most this many components per parameter (evenly strided); 0 = all.
  std::size_t max_components = 0;
};

/// Compares reverse-mode gradients of a scalar objective against central
/// differences. `f` rebuilds the graph from the current parameter values.
inline GradCheckResult grad_check(const std::function<ad::Var()>& f, std::vector<ad::Var> params,
                                  const GradCheckOptions& opt = {}) {
  for (auto& p : params) p.zero_grad();
  ad::Var loss = f();
  if (loss.size() != 1) throw DimensionError("grad_check: objective must be scalar");
  if (!std::isfinite(loss.value()[0])) throw NumericError("grad_check: non-finite objective");
  ad::backward(loss);

  auto eval = [&]() {
    const double v = f().value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite objective near parameter");
    return v;
  };

  GradCheckResult res;
  for (auto& p : params) {
    const Tensor analytic = p.grad();
    Tensor& val = p.mutable_value();
    const std::size_t n = val.size();
    std::size_t step = 1;
    if (opt.max_components && n > opt.max_components) step = (n + opt.max_components - 1) / opt.max_components;
    for (std::size_t i = 0; i < n; i += step) {
      const double orig = val[i];
      val[i] = orig + opt.eps;
      const double fp = eval();
      val[i] = orig - opt.eps;
      const double fm = eval();
      val[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double a = analytic[i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
      res.max_abs_err = std::max(res.max_abs_err, abs_err);
      res.max_rel_err = std::max(res.max_rel_err, abs_err / denom);
      ++res.components;
    }
  }
  return res;
}

/// Single-tensor convenience form: f maps a parameter leaf to a scalar.
inline GradCheckResult grad_check(const std::function<ad::Var(const ad::Var&)>& f, const Tensor& theta,
                                  const GradCheckOptions& opt = {}) {
  ad::Var x = ad::param(theta);
  return grad_check([&]() { return f(x); }, {x}, opt);
}

}  // namespace ipdr
