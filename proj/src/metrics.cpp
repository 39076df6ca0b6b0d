// SPDX-License-Identifier: Apache-2.0
#include "affect/metrics.hpp"

#include <atomic>
#include <cmath>
#include <iostream>

#include "affect/error.hpp"

namespace affect {

namespace {

std::atomic<long> g_ccc_guard_count{0};

void require_pair(std::size_t n_pred, std::size_t n_label, const char* who) {
  if (n_pred != n_label) {
    throw ContractError(std::string(who) + ": length mismatch, " + std::to_string(n_pred) +
                        " vs " + std::to_string(n_label));
  }
  if (n_pred < 2) {
    throw ContractError(std::string(who) + ": need at least 2 samples, got " +
                        std::to_string(n_pred));
  }
}

}  // namespace

MomentSummary moments(const std::vector<double>& pred, const std::vector<double>& label) {
  require_pair(pred.size(), label.size(), "moments");
  const double n = static_cast<double>(pred.size());
  double mp = 0.0, ml = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    ml += label[i];
  }
  mp /= n;
  ml /= n;
  double vp = 0.0, vl = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dp = pred[i] - mp;
    const double dl = label[i] - ml;
    vp += dp * dp;
    vl += dl * dl;
    cov += dp * dl;
  }
  vp /= n;
  vl /= n;
  cov /= n;
  MomentSummary m;
  m.mean_pred = mp;
  m.mean_label = ml;
  m.std_pred = std::sqrt(vp);
  m.std_label = std::sqrt(vl);
  m.covariance = cov;
  m.pearson = (m.std_pred > 0.0 && m.std_label > 0.0) ? cov / (m.std_pred * m.std_label) : 0.0;
  return m;
}

double ccc(const std::vector<double>& pred, const std::vector<double>& label) {
  require_pair(pred.size(), label.size(), "ccc");
  // Variances are kept as variances here; squaring a stored standard
  // deviation back would cost an ulp and break the pred==label -> 1 identity.
  const double n = static_cast<double>(pred.size());
  double mp = 0.0, ml = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    ml += label[i];
  }
  mp /= n;
  ml /= n;
  double vp = 0.0, vl = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dp = pred[i] - mp;
    const double dl = label[i] - ml;
    vp += dp * dp;
    vl += dl * dl;
    cov += dp * dl;
  }
  vp /= n;
  vl /= n;
  cov /= n;
  const double mean_diff = mp - ml;
  const double denom = vp + vl + mean_diff * mean_diff;
  if (denom == 0.0) return 0.0;
  return 2.0 * cov / denom;
}

CccResult ccc_va(const std::vector<double>& pred_v, const std::vector<double>& pred_a,
                 const std::vector<double>& label_v, const std::vector<double>& label_a) {
  CccResult r;
  r.ccc_v = ccc(pred_v, label_v);
  r.ccc_a = ccc(pred_a, label_a);
  r.combined = va_combined(r.ccc_v, r.ccc_a);
  return r;
}

double va_combined(double ccc_v, double ccc_a) { return (ccc_v + ccc_a) / 2.0; }

long ccc_guard_count() { return g_ccc_guard_count.load(); }

namespace {

// Differentiable CCC for one channel; pred [N] through the tape, label [N]
// constant.
Tensor ccc_channel(const Tensor& pred_in, const Tensor& label_in) {
  if (pred_in.numel() != label_in.numel()) {
    throw ContractError("ccc_loss: prediction/label length mismatch, " +
                        std::to_string(pred_in.numel()) + " vs " +
                        std::to_string(label_in.numel()));
  }
  if (pred_in.numel() < 2) {
    throw ContractError("ccc_loss: need at least 2 samples, got " +
                        std::to_string(pred_in.numel()));
  }
  Tensor pred = pred_in.rank() == 1 ? pred_in : reshape(pred_in, {pred_in.numel()});
  Tensor label = label_in.rank() == 1 ? label_in : reshape(label_in, {label_in.numel()});
  const double inv_n = 1.0 / static_cast<double>(pred.numel());
  Tensor mean_p = scale(sum_all(pred), inv_n);
  Tensor mean_l = scale(sum_all(label), inv_n);
  Tensor cp = pred - mean_p;
  Tensor cl = label - mean_l;
  Tensor cov = scale(sum_all(cp * cl), inv_n);
  Tensor var_p = scale(sum_all(cp * cp), inv_n);
  Tensor var_l = scale(sum_all(cl * cl), inv_n);
  Tensor mean_diff = mean_p - mean_l;
  Tensor denom = var_p + var_l + mean_diff * mean_diff;
  if (denom.item() < 1e-8) {
    g_ccc_guard_count.fetch_add(1);
    std::cerr << "ccc_loss: near-constant batch, adding denominator guard 1e-8\n";
    denom = add_const(denom, 1e-8);
  }
  return divide(scale(cov, 2.0), denom);
}

}  // namespace

Tensor ccc_loss(const Tensor& pred_v, const Tensor& pred_a, const Tensor& label_v,
                const Tensor& label_a) {
  Tensor combined = scale(ccc_channel(pred_v, label_v) + ccc_channel(pred_a, label_a), 0.5);
  return Tensor::scalar(1.0) - combined;
}

namespace {

Tensor head_ccc_loss(const Tensor& pred, const Tensor& labels) {
  if (pred.rank() != 2 || pred.dim(1) != 2 || pred.shape() != labels.shape()) {
    throw ContractError("stage1_combined_loss: predictions and labels must share shape [N,2], got " +
                        pred.shape_str() + " and " + labels.shape_str());
  }
  return ccc_loss(slice_last(pred, 0, 1), slice_last(pred, 1, 1), slice_last(labels, 0, 1),
                  slice_last(labels, 1, 1));
}

}  // namespace

Tensor stage1_combined_loss(const Tensor& fused, const Tensor& gru_head, const Tensor& trf_head,
                            const Tensor& labels, const Stage1LossWeights& weights) {
  Tensor total = scale(head_ccc_loss(fused, labels), weights.fused);
  total = total + scale(head_ccc_loss(gru_head, labels), weights.gru);
  total = total + scale(head_ccc_loss(trf_head, labels), weights.transformer);
  return total;
}

Tensor focal_loss(const Tensor& prob, const Tensor& target, double gamma, double alpha) {
  if (prob.shape() != target.shape()) {
    throw ContractError("focal_loss: prob shape " + prob.shape_str() + " != target shape " +
                        target.shape_str());
  }
  for (double t : target.data()) {
    if (t != 0.0 && t != 1.0) {
      throw ContractError("focal_loss: targets must be exactly 0 or 1, got " + std::to_string(t));
    }
  }
  const Tensor one = Tensor::scalar(1.0);
  Tensor p = clamp(prob, 1e-7, 1.0 - 1e-7);
  Tensor p_t = p * target + (one - p) * (one - target);
  Tensor modulated = pow(one - p_t, gamma) * log(p_t);
  return scale(sum_all(modulated), -alpha / static_cast<double>(prob.numel()));
}

namespace {

double f1_from_counts(long tp, long fp, long fn) {
  const long denom = 2 * tp + fp + fn;
  if (denom == 0) return 0.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

void check_bits(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& target,
                long channels) {
  if (pred.size() != target.size()) {
    throw ContractError("f1: prediction/target size mismatch, " + std::to_string(pred.size()) +
                        " vs " + std::to_string(target.size()));
  }
  if (channels < 1 || pred.size() % static_cast<std::size_t>(channels) != 0) {
    throw ContractError("f1: bit count " + std::to_string(pred.size()) +
                        " is not a multiple of channel count " + std::to_string(channels));
  }
}

}  // namespace

double f1_macro(const std::vector<std::uint8_t>& pred_bits,
                const std::vector<std::uint8_t>& target_bits, long channels) {
  check_bits(pred_bits, target_bits, channels);
  const long n = static_cast<long>(pred_bits.size()) / channels;
  double sum = 0.0;
  for (long c = 0; c < channels; ++c) {
    long tp = 0, fp = 0, fn = 0;
    for (long i = 0; i < n; ++i) {
      const bool p = pred_bits[i * channels + c] != 0;
      const bool t = target_bits[i * channels + c] != 0;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
    }
    sum += f1_from_counts(tp, fp, fn);
  }
  return sum / static_cast<double>(channels);
}

double f1_micro(const std::vector<std::uint8_t>& pred_bits,
                const std::vector<std::uint8_t>& target_bits, long channels) {
  check_bits(pred_bits, target_bits, channels);
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred_bits.size(); ++i) {
    const bool p = pred_bits[i] != 0;
    const bool t = target_bits[i] != 0;
    tp += p && t;
    fp += p && !t;
    fn += !p && t;
  }
  return f1_from_counts(tp, fp, fn);
}

}  // namespace affect
