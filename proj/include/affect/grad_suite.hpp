// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace affect {

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 1e-4;
  bool pass = false;
};

/**
 * Finite-difference sweep over every layer type: GRU stacks of depth 1-4, the
 * transformer block, local attention at window radii 0/2/5, the bounded VA
 * head, the dual-branch AU detector, and both losses. Shapes stay small
 * (batch <= 2, time <= 8, dim <= 8); gradients are checked for every
 * parameter and for the input.
 */
std::vector<GradCheckCase> run_grad_check_suite(std::uint64_t seed = 7);

}  // namespace affect
