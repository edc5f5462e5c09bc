#pragma once

#include <functional>
#include <span>

#include "rtal/tensor.hpp"

namespace rtal {

/// Relative discrepancy used by the gradient checks:
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double relative_error(double analytic, double numeric);

/// Compares reverse-mode gradients of `f` at `x` with central differences.
///
/// Non-scalar outputs are reduced to sum(f(x) * w) with fixed pseudo-random
/// weights w in [-1, 1], so every output coordinate contributes. `x` must be
/// double precision and `f` deterministic. Returns the maximum relative error
/// over the coordinates of `x`.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step = 1e-5);

/// Same comparison for a scalar loss with respect to a set of parameter
/// tensors, which are perturbed in place and restored.
double grad_check_params(const std::function<Tensor()>& loss, std::span<Tensor> params, double step = 1e-5);

}  // namespace rtal
