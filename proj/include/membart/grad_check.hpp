#pragma once

#include <functional>

#include "membart/ops.hpp"

namespace membart {

// Central finite differences: per element, (f(x+h e) - f(x-h e)) / 2h.
// f must be deterministic and scalar-valued; x is nudged in place and
// restored, so f should read x's current contents on each call.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T()>& f, Tensor<T>& x, T step) {
  Tensor<T> g(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    T saved = x.data()[i];
    x.data()[i] = saved + step;
    T up = f();
    x.data()[i] = saved - step;
    T down = f();
    x.data()[i] = saved;
    if (!std::isfinite(static_cast<double>(up)) || !std::isfinite(static_cast<double>(down)))
      throw Error("finite_diff_grad: non-finite function value");
    g.data()[i] = (up - down) / (T(2) * step);
  }
  return g;
}

// Gradient-check verdict: per element, pass when |a-f| < atol or the relative
// error against max(|a|,|f|) is below rtol.
template <typename T>
struct GradCheckResult {
  bool ok = true;
  double max_rel = 0.0;
  double max_abs = 0.0;
  int64_t worst_index = -1;
};

template <typename T>
GradCheckResult<T> compare_grads(const Tensor<T>& analytic, const Tensor<T>& numeric, double rtol = 1e-4,
                                 double atol = 1e-7) {
  GradCheckResult<T> res;
  for (int64_t i = 0; i < analytic.numel(); ++i) {
    double a = static_cast<double>(analytic.data()[i]);
    double f = static_cast<double>(numeric.data()[i]);
    double abs_err = std::abs(a - f);
    double rel = abs_err / std::max(std::max(std::abs(a), std::abs(f)), 1e-12);
    if (abs_err > res.max_abs) res.max_abs = abs_err;
    if (abs_err >= atol && rel > res.max_rel) {
      res.max_rel = rel;
      res.worst_index = i;
    }
    if (abs_err >= atol && rel >= rtol) res.ok = false;
  }
  return res;
}

}  // namespace membart
