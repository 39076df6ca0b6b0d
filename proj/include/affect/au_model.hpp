// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "affect/models.hpp"

namespace affect {

/**
 * Action-unit detector with two transformer branches over the same feature
 * stream. Branch one runs at the source width; branch two expands to a wider
 * representation, runs its own blocks there, and compresses back. Three heads
 * emit 12 logits each: one per branch plus one on the concatenated branch
 * outputs. The detector's output averages the three heads' logits.
 */
struct AuModel {
  ModelSpec spec;
  std::vector<TransformerBlockParams> t1;
  LinearParams expand;    // d -> d_e, d_e > d
  std::vector<TransformerBlockParams> t2;
  LinearParams compress;  // d_e -> d
  LinearParams head_t1;   // d -> 12
  LinearParams head_t2;   // d -> 12
  LinearParams head_joint;  // 2d -> 12

  static AuModel build(const ModelSpec& spec, Rng& rng);

  struct Out {
    Tensor probs;        // [B, T, 12], sigmoid of the mean logits
    Tensor mean_logits;  // [B, T, 12]
    Tensor probs_t1, probs_t2, probs_joint;
    Tensor logits_t1, logits_t2, logits_joint;
  };
  Out forward(const Tensor& x) const;

  /// Branch-one-only probabilities: sigmoid(head_t1(T1(x))). The op sequence
  /// matches the T1 path inside forward() exactly.
  Tensor ablate_t1(const Tensor& x) const;

  NamedParams named_params() const;

  long expanded_dim() const;
};

/// bit = (prob >= threshold); probs must lie in [0, 1].
std::vector<std::uint8_t> au_predict(const std::vector<double>& probs, double threshold = 0.5);

}  // namespace affect
