#include "tvcl/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace tvcl {

double finite_diff_check(const ScalarLoss& loss_fn, const Tensor64& params, const Tensor64& analytic_grad,
                         double eps) {
  if (!(eps > 0.0)) throw PreconditionError("finite_diff_check: eps must be positive");
  if (params.shape() != analytic_grad.shape()) {
    throw DimensionError("finite_diff_check: gradient shape " + shape_to_string(analytic_grad.shape()) +
                         " does not match parameters " + shape_to_string(params.shape()));
  }
  Tensor64 probe = params;
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double up = loss_fn(probe);
    probe[i] = saved - eps;
    const double down = loss_fn(probe);
    probe[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_check: non-finite loss at element " + std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * eps);
    const double analytic = analytic_grad[i];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  }
  return worst;
}

}  // namespace tvcl
