#pragma once

#include <functional>
#include <string>

#include "gem/param_store.hpp"
#include "gem/tensor.hpp"

namespace gem {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares reverse-mode gradients of a deterministic scalar loss against
// central differences (f(p+h) - f(p-h)) / 2h for every parameter element.
// Returns the max of |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckResult grad_check_detailed(const std::function<Tensor(ParamStore&)>& loss_fn,
                                           ParamStore& params, double h) {
  if (!(h >= 1e-6 && h <= 1e-4))
    throw std::invalid_argument("grad_check: h must lie in [1e-6, 1e-4]");

  params.zero_grad();
  Tensor loss = loss_fn(params);
  if (loss.size() != 1)
    shape_error("grad_check", "loss must be scalar, got " + shape_str(loss.shape()));
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& [name, t] : params) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(std::size_t(t.size()), 0.0);
  }

  GradCheckResult r;
  std::size_t pi = 0;
  for (auto& [name, t] : params) {
    auto vals = t.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double v0 = vals[i];
      double lp, lm;
      {
        NoGradGuard ng;
        vals[i] = v0 + h;
        lp = loss_fn(params).item();
        vals[i] = v0 - h;
        lm = loss_fn(params).item();
        vals[i] = v0;
      }
      if (!std::isfinite(lp) || !std::isfinite(lm))
        throw NumericError("grad_check: non-finite loss while perturbing \"" + name + "\"");
      const double num = (lp - lm) / (2.0 * h);
      const double ana = analytic[pi][i];
      const double rel =
          std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-8});
      if (rel > r.max_rel_err) {
        r.max_rel_err = rel;
        r.worst_param = name;
        r.worst_index = std::int64_t(i);
        r.analytic = ana;
        r.numeric = num;
      }
    }
    ++pi;
  }
  return r;
}

inline double grad_check(const std::function<Tensor(ParamStore&)>& loss_fn, ParamStore& params,
                         double h) {
  return grad_check_detailed(loss_fn, params, h).max_rel_err;
}

}  // namespace gem
