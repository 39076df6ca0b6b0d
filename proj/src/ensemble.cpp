// SPDX-License-Identifier: Apache-2.0
#include "affect/ensemble.hpp"

#include <algorithm>

#include "affect/error.hpp"
#include "affect/rng.hpp"

namespace affect {

int FoldAssignment::fold(const std::string& video_id) const {
  auto it = fold_of.find(video_id);
  if (it == fold_of.end()) {
    throw ContractError("FoldAssignment: unknown video '" + video_id + "'");
  }
  return it->second;
}

std::vector<long> FoldAssignment::sizes() const {
  std::vector<long> s(fold_count, 0);
  for (const auto& [id, f] : fold_of) {
    (void)id;
    ++s[f];
  }
  return s;
}

FoldAssignment kfold_split(const std::vector<std::string>& video_ids, int fold_count,
                           std::uint64_t seed) {
  if (fold_count < 2) throw ContractError("kfold_split: fold count must be >= 2");
  if (static_cast<long>(video_ids.size()) < fold_count) {
    throw ContractError("kfold_split: " + std::to_string(video_ids.size()) +
                        " videos cannot fill " + std::to_string(fold_count) + " folds");
  }
  {
    std::vector<std::string> sorted(video_ids);
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw ContractError("kfold_split: duplicate video id");
    }
  }
  std::vector<std::string> order(video_ids);
  Rng rng(seed);
  rng.shuffle(order);
  FoldAssignment a;
  a.fold_count = fold_count;
  for (std::size_t i = 0; i < order.size(); ++i) {
    a.fold_of[order[i]] = static_cast<int>(i % static_cast<std::size_t>(fold_count));
  }
  return a;
}

FoldScoreSequence build_fold_scores(
    const std::string& video_id,
    const std::vector<std::vector<std::array<double, 2>>>& per_fold_predictions) {
  if (per_fold_predictions.empty()) {
    throw ContractError("build_fold_scores: no fold predictions for video '" + video_id + "'");
  }
  const int k = static_cast<int>(per_fold_predictions.size());
  const long frames = static_cast<long>(per_fold_predictions[0].size());
  if (frames < 1) {
    throw ContractError("build_fold_scores: empty prediction stream for video '" + video_id + "'");
  }
  for (int f = 0; f < k; ++f) {
    if (static_cast<long>(per_fold_predictions[f].size()) != frames) {
      throw ContractError("build_fold_scores: frame count mismatch for video '" + video_id +
                          "': fold " + std::to_string(f) + " has " +
                          std::to_string(per_fold_predictions[f].size()) + " frames, expected " +
                          std::to_string(frames));
    }
  }
  FoldScoreSequence out;
  out.video_id = video_id;
  out.fold_count = k;
  out.n_frames = frames;
  out.values.resize(frames * 2L * k);
  for (long i = 0; i < frames; ++i) {
    double* row = out.values.data() + i * 2L * k;
    for (int f = 0; f < k; ++f) {
      row[f] = per_fold_predictions[f][i][0];      // V^1..V^K
      row[k + f] = per_fold_predictions[f][i][1];  // A^1..A^K
    }
  }
  return out;
}

std::vector<std::array<double, 2>> slice_fold(const FoldScoreSequence& scores, int fold) {
  if (fold < 0 || fold >= scores.fold_count) {
    throw ContractError("slice_fold: fold " + std::to_string(fold) + " out of range [0, " +
                        std::to_string(scores.fold_count) + ")");
  }
  std::vector<std::array<double, 2>> out(scores.n_frames);
  const long w = scores.width();
  for (long i = 0; i < scores.n_frames; ++i) {
    out[i][0] = scores.values[i * w + fold];
    out[i][1] = scores.values[i * w + scores.fold_count + fold];
  }
  return out;
}

std::vector<std::array<double, 2>> average_folds(const FoldScoreSequence& scores) {
  std::vector<std::array<double, 2>> out(scores.n_frames);
  const long w = scores.width();
  const double inv_k = 1.0 / static_cast<double>(scores.fold_count);
  for (long i = 0; i < scores.n_frames; ++i) {
    const double* row = scores.values.data() + i * w;
    double sv = 0.0, sa = 0.0;
    for (int f = 0; f < scores.fold_count; ++f) {
      sv += row[f];
      sa += row[scores.fold_count + f];
    }
    out[i][0] = sv * inv_k;
    out[i][1] = sa * inv_k;
  }
  return out;
}

Stage2Model Stage2Model::build(const ModelSpec& spec, Rng& rng) {
  if (spec.kind != "stage2") throw ConfigError("Stage2Model: spec kind is '" + spec.kind + "'");
  if (spec.fold_count < 2) throw ConfigError("Stage2Model: fold count must be >= 2");
  if (spec.feat_dim != 2 * spec.fold_count) {
    throw ConfigError("Stage2Model: feat_dim " + std::to_string(spec.feat_dim) +
                      " must equal 2K = " + std::to_string(2 * spec.fold_count));
  }
  Stage2Model m;
  m.spec = spec;
  long d_in = spec.feat_dim;
  for (long l = 0; l < spec.gru_layers; ++l) {
    m.gru.push_back(GruLayerParams::init(d_in, spec.gru_hidden, rng));
    d_in = spec.gru_hidden;
  }
  const long d_attn = spec.attn_dim > 0 ? spec.attn_dim : spec.gru_hidden;
  m.attn1 = LocalAttentionParams::init(spec.gru_hidden, d_attn, spec.attn_window, rng);
  m.attn2 = LocalAttentionParams::init(spec.gru_hidden, d_attn, spec.attn_window, rng);
  m.head = LinearParams::init(spec.gru_hidden, 2, rng);
  return m;
}

Tensor Stage2Model::forward(const Tensor& x) const {
  if (x.rank() != 3) {
    throw DimensionError("Stage2Model: input must be [B,T,2K], got " + x.shape_str());
  }
  if (x.dim(2) != spec.feat_dim) {
    throw CheckpointError("Stage2Model: feature width " + std::to_string(x.dim(2)) +
                          " does not match the trained width 2K = " + std::to_string(spec.feat_dim));
  }
  Tensor h = gru_forward(gru, x).sequence;
  h = local_attention_forward(attn1, h);
  h = local_attention_forward(attn2, h);
  return va_head_forward(head, h);
}

NamedParams Stage2Model::named_params() const {
  NamedParams out;
  register_gru(out, "gru", gru);
  register_local_attention(out, "attn1", attn1);
  register_local_attention(out, "attn2", attn2);
  register_linear(out, "head", head);
  return out;
}

}  // namespace affect
