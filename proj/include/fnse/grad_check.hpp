#pragma once

#include <functional>
#include <vector>

#include "fnse/tensor.hpp"

namespace fnse::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;  // flat index over all checked leaves
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares analytic gradients of a scalar function with central differences.
// Per coordinate: |analytic - cd| / max(|analytic|, |cd|, 1e-8); the maximum is
// returned. eps must lie in [1e-7, 1e-3].
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-6);

// Same check over several leaves that f closes over. The leaves are perturbed
// in place and restored; they must require grad.
GradCheckResult grad_check_leaves(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                                  double eps = 1e-6);

}  // namespace fnse::ad
