// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "affect/config.hpp"
#include "affect/layers.hpp"

namespace affect {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

/// Layer topology, serialized into every checkpoint.
struct ModelSpec {
  std::string kind;  // stage1 | stage2 | au
  long feat_dim = 0;
  long gru_layers = 2;
  long gru_hidden = 256;
  long trf_blocks = 1;
  long trf_heads = 4;
  long trf_ff = 0;  // 0 -> 4 * dim
  long attn_window = 5;
  long attn_dim = 0;  // 0 -> dim
  long fold_count = 5;
  long au_blocks = 2;
  long au_heads = 4;
  long au_expand = 0;  // 0 -> 2 * dim
  long au_channels = 12;

  std::string to_text() const;
  static ModelSpec from_text(const std::string& text, const std::string& origin);
};

/// Topology for a task, taking dims from the config and the data.
ModelSpec make_model_spec(Task task, const TrainConfig& config, long feat_dim);

// Named-parameter registration helpers shared by the model structs.
void register_linear(NamedParams& out, const std::string& prefix, const LinearParams& p);
void register_gru(NamedParams& out, const std::string& prefix,
                  const std::vector<GruLayerParams>& layers);
void register_transformer(NamedParams& out, const std::string& prefix,
                          const std::vector<TransformerBlockParams>& blocks);
void register_local_attention(NamedParams& out, const std::string& prefix,
                              const LocalAttentionParams& p);

/**
 * Stage-1 feature-fusion model: a stacked GRU and a Transformer encoder run
 * in parallel over the same per-frame features; their outputs are
 * concatenated for the fused valence/arousal head, and each branch carries
 * its own auxiliary head for the combined loss.
 */
struct Stage1Model {
  ModelSpec spec;
  std::vector<GruLayerParams> gru;
  std::vector<TransformerBlockParams> blocks;
  LinearParams head_fused;  // (gru_hidden + feat_dim) -> 2
  LinearParams head_gru;    // gru_hidden -> 2
  LinearParams head_trf;    // feat_dim -> 2

  static Stage1Model build(const ModelSpec& spec, Rng& rng);

  struct Heads {
    Tensor fused;     // [B, T, 2], tanh-bounded
    Tensor gru_head;  // [B, T, 2]
    Tensor trf_head;  // [B, T, 2]
  };
  Heads forward(const Tensor& x) const;

  NamedParams named_params() const;
};

}  // namespace affect
