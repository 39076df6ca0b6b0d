// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "affect/models.hpp"

namespace affect {

/// Whole-video assignment of training videos to folds; fold sizes differ by at
/// most one video.
struct FoldAssignment {
  int fold_count = 0;
  std::map<std::string, int> fold_of;

  int fold(const std::string& video_id) const;
  std::vector<long> sizes() const;
};

/// Deterministic per seed. Requires fold_count >= 2 and at least fold_count
/// videos.
FoldAssignment kfold_split(const std::vector<std::string>& video_ids, int fold_count,
                           std::uint64_t seed);

/**
 * Per-frame fold-score vectors for one video: each frame carries the K fold
 * models' valence predictions followed by their arousal predictions,
 * [V^1..V^K, A^1..A^K].
 */
struct FoldScoreSequence {
  std::string video_id;
  int fold_count = 0;
  long n_frames = 0;
  std::vector<double> values;    // n_frames * 2K
  std::vector<float> va_labels;  // n_frames * 2 ground truth, optional

  long width() const { return 2L * fold_count; }
};

/// Interleaves K per-frame (valence, arousal) streams into the fold-score
/// layout. All streams must have the same frame count; a mismatch names the
/// video and the offending fold.
FoldScoreSequence build_fold_scores(
    const std::string& video_id,
    const std::vector<std::vector<std::array<double, 2>>>& per_fold_predictions);

/// Recovers fold k's (valence, arousal) stream exactly.
std::vector<std::array<double, 2>> slice_fold(const FoldScoreSequence& scores, int fold);

/// Per-frame mean over folds: (mean V^k, mean A^k).
std::vector<std::array<double, 2>> average_folds(const FoldScoreSequence& scores);

/**
 * Stage-2 stacking model: a deep GRU over fold-score windows, two local
 * attention layers, and a tanh-bounded valence/arousal head.
 */
struct Stage2Model {
  ModelSpec spec;
  std::vector<GruLayerParams> gru;
  LocalAttentionParams attn1, attn2;
  LinearParams head;

  static Stage2Model build(const ModelSpec& spec, Rng& rng);

  /// x: [B, T, 2K] -> [B, T, 2]. A feature width other than 2K means the
  /// checkpoint does not match the data and raises CheckpointError.
  Tensor forward(const Tensor& x) const;

  NamedParams named_params() const;
};

}  // namespace affect
