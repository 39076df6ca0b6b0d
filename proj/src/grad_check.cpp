// SPDX-License-Identifier: Apache-2.0
#include "affect/grad_check.hpp"

#include <cmath>
#include <vector>

#include "affect/error.hpp"
#include "affect/rng.hpp"

namespace affect {

double grad_check(const std::function<Tensor()>& scalar_fn, Tensor& target, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) {
    throw ContractError("grad_check: eps must lie in (0, 1e-2], got " + std::to_string(eps));
  }
  if (!target.defined()) throw ContractError("grad_check: undefined target tensor");
  target.set_requires_grad(true);

  std::vector<double> analytic;
  {
    Tape tape;
    Tensor loss = scalar_fn();
    if (loss.numel() != 1) {
      throw ContractError("grad_check: closure returned shape " + loss.shape_str() +
                          ", want a scalar");
    }
    target.zero_grad();
    tape.backward(loss);
    analytic = target.has_grad() ? target.grad() : std::vector<double>(target.numel(), 0.0);
    target.zero_grad();
  }

  auto& x = target.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double up = scalar_fn().item();
    x[i] = saved - eps;
    const double down = scalar_fn().item();
    x[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

double grad_check_fn(const std::function<Tensor(const Tensor&)>& fn, Tensor& x, double eps,
                     std::uint64_t projection_seed) {
  // Fix the projection once so every evaluation contracts with the same
  // weights regardless of the output shape re-materializing.
  Tensor probe = fn(x);
  Rng rng(projection_seed);
  std::vector<double> w(probe.numel());
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  Tensor weights = Tensor::from_data(probe.shape(), std::move(w));

  auto scalar_fn = [&fn, &x, &weights]() { return sum_all(mul(fn(x), weights)); };
  return grad_check(scalar_fn, x, eps);
}

}  // namespace affect
