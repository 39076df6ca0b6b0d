// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "affect/tensor.hpp"

namespace affect {

/// Population moments (divisor N) of a prediction/label pair.
struct MomentSummary {
  double mean_label = 0.0;
  double mean_pred = 0.0;
  double std_label = 0.0;
  double std_pred = 0.0;
  double pearson = 0.0;     // 0 when either std is 0
  double covariance = 0.0;  // == pearson * std_label * std_pred when both std > 0
};

MomentSummary moments(const std::vector<double>& pred, const std::vector<double>& label);

/**
 * Concordance correlation coefficient,
 *   2 cov / (var_pred + var_label + (mean_pred - mean_label)^2),
 * population moments, covariance form. Returns 0 when the denominator is 0.
 * Requires equal lengths >= 2.
 */
double ccc(const std::vector<double>& pred, const std::vector<double>& label);

struct CccResult {
  double ccc_v = 0.0;
  double ccc_a = 0.0;
  double combined = 0.0;  // (ccc_v + ccc_a) / 2
};

CccResult ccc_va(const std::vector<double>& pred_v, const std::vector<double>& pred_a,
                 const std::vector<double>& label_v, const std::vector<double>& label_a);

/// Mean of the valence and arousal CCCs.
double va_combined(double ccc_v, double ccc_a);

/// Times the degenerate-denominator guard (epsilon 1e-8) fired in ccc_loss.
long ccc_guard_count();

/**
 * Differentiable loss 1 - (ccc_v + ccc_a)/2 over flat per-frame sequences.
 * Labels are constants. A constant batch (zero denominator) is guarded with
 * epsilon 1e-8 and counted via ccc_guard_count().
 */
Tensor ccc_loss(const Tensor& pred_v, const Tensor& pred_a, const Tensor& label_v,
                const Tensor& label_a);

struct Stage1LossWeights {
  double fused = 1.0;
  double gru = 1.0;
  double transformer = 1.0;
};

/**
 * Weighted sum of the per-head CCC losses. Each prediction tensor is [N, 2]
 * (valence, arousal per frame); labels are [N, 2] constants.
 */
Tensor stage1_combined_loss(const Tensor& fused, const Tensor& gru_head, const Tensor& trf_head,
                            const Tensor& labels, const Stage1LossWeights& weights = {});

/**
 * Mean focal loss over a batch of independent binary channels.
 *   FL(p_t) = -alpha (1 - p_t)^gamma log(p_t),  p_t = p if y==1 else 1-p
 * Probabilities are clamped to [1e-7, 1 - 1e-7]. Targets must be exactly 0
 * or 1.
 */
Tensor focal_loss(const Tensor& prob, const Tensor& target, double gamma = 2.0,
                  double alpha = 0.25);

/// Macro F1 over `channels` binary labels; per-channel F1 = 2TP/(2TP+FP+FN),
/// defined as 0 when the denominator is 0. Bit vectors are row-major [N, channels].
double f1_macro(const std::vector<std::uint8_t>& pred_bits,
                const std::vector<std::uint8_t>& target_bits, long channels = 12);

/// Micro F1: one global confusion count over all channels.
double f1_micro(const std::vector<std::uint8_t>& pred_bits,
                const std::vector<std::uint8_t>& target_bits, long channels = 12);

}  // namespace affect
