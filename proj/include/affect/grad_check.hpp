// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>

#include "affect/tensor.hpp"

namespace affect {

/**
 * Compares the analytic gradient of a scalar-valued closure against central
 * finite differences, element by element, and returns
 *   max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|).
 *
 * The closure must be deterministic and must re-read `target` on every call;
 * `target`'s data is perturbed in place and restored exactly. eps must lie in
 * (0, 1e-2]. Non-finite intermediates propagate as NumericError, which carries
 * the offending op's serial number.
 */
double grad_check(const std::function<Tensor()>& scalar_fn, Tensor& target, double eps = 1e-5);

/**
 * grad_check for a possibly vector-valued f(x): the output is contracted with
 * a fixed random projection (seeded, so the scalarized function is
 * deterministic) and the gradient is checked with respect to x.
 */
double grad_check_fn(const std::function<Tensor(const Tensor&)>& fn, Tensor& x, double eps = 1e-5,
                     std::uint64_t projection_seed = 0x5eedu);

}  // namespace affect
