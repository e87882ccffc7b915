#pragma once

#include <functional>
#include <vector>

#include "rainforge/tensor.hpp"

namespace rainforge {

struct GradCheckReport {
  double max_rel_error = 0.0;
  int64_t checked = 0;
  /// Elements at or near a kink (relu at 0, ties in max): the gap between
  /// one-sided differences does not scale with the step as it would for a
  /// smooth function.
  std::vector<int64_t> excluded;
  bool passed = false;
};

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences (f(x+h) - f(x-h)) / 2h. The error per element is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
///
/// `max_elements` > 0 checks an evenly strided subset. `x` must be f64.
GradCheckReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                        const Tensor& x, double step = 1e-5, double tol = 1e-6,
                                        int64_t max_elements = 0);

/// Same comparison for a tensor held elsewhere (typically a layer parameter):
/// `param` is perturbed in place and `loss` re-evaluated.
GradCheckReport parameter_gradient_check(Tensor param, const std::function<Tensor()>& loss,
                                         double step = 1e-5, double tol = 1e-6,
                                         int64_t max_elements = 0);

}  // namespace rainforge
