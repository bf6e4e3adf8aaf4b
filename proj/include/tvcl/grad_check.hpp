#pragma once

#include <functional>

#include "tvcl/tensor.hpp"

namespace tvcl {

using ScalarLoss = std::function<double(const Tensor64&)>;

// Central-difference check of an analytic gradient. Returns the largest
// per-element relative error |a - n| / max(|a|, |n|, 1e-8).
double finite_diff_check(const ScalarLoss& loss_fn, const Tensor64& params, const Tensor64& analytic_grad,
                         double eps);

}  // namespace tvcl
