#include "fnse/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "fnse/errors.hpp"

namespace fnse::ad {

GradCheckResult grad_check_leaves(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                                  double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ValidationError("grad_check: eps must lie in [1e-7, 1e-3]");
  }
  for (auto& leaf : leaves) {
    if (!leaf.requires_grad()) throw ValidationError("grad_check: leaf does not require grad");
    leaf.zero_grad();
  }
  const Tensor y = f();
  if (y.size() != 1) throw ValidationError("grad_check: function must be scalar-valued");
  if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite function value");
  y.backward();

  GradCheckResult res;
  std::size_t flat = 0;
  NoGradGuard no_grad;
  for (auto& leaf : leaves) {
    std::vector<double> analytic(leaf.size(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    auto vals = leaf.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i, ++flat) {
      const double orig = vals[i];
      vals[i] = orig + eps;
      const double fp = f().item();
      vals[i] = orig - eps;
      const double fm = f().item();
      vals[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("grad_check: non-finite value at coordinate " + std::to_string(flat));
      }
      const double cd = (fp - fm) / (2.0 * eps);
      const double a = analytic[i];
      const double rel = std::abs(a - cd) / std::max({std::abs(a), std::abs(cd), 1e-8});
      if (rel > res.max_rel_error || flat == 0) {
        res.max_rel_error = std::max(res.max_rel_error, rel);
        if (rel >= res.max_rel_error) {
          res.worst_index = flat;
          res.analytic = a;
          res.numeric = cd;
        }
      }
    }
    leaf.zero_grad();
  }
  return res;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = x.clone(true);
  return grad_check_leaves([&] { return f(leaf); }, {leaf}, eps).max_rel_error;
}

}  // namespace fnse::ad
