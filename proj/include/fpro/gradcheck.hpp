#pragma once

#include <functional>

#include "fpro/tensor.hpp"

namespace fpro {

// Central-difference audit of d(f)/d(x). f recomputes its scalar value from
// the current contents of x, which is perturbed in place coordinate by
// coordinate. Returns max_i |analytic_i - cd_i| / max(1, |cd_i|).
// Double precision only; the tolerance is meaningless in single.
double finite_diff_check(const std::function<Tensor<double>()>& f, Tensor<double>& x,
                         double eps = 1e-5);

}  // namespace fpro
