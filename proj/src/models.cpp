// SPDX-License-Identifier: Apache-2.0
#include "affect/models.hpp"

#include "affect/error.hpp"

namespace affect {

std::string ModelSpec::to_text() const {
  std::string out;
  auto put = [&out](const char* k, long v) { out += std::string(k) + " = " + std::to_string(v) + "\n"; };
  out += "kind = " + kind + "\n";
  put("feat_dim", feat_dim);
  put("gru_layers", gru_layers);
  put("gru_hidden", gru_hidden);
  put("trf_blocks", trf_blocks);
  put("trf_heads", trf_heads);
  put("trf_ff", trf_ff);
  put("attn_window", attn_window);
  put("attn_dim", attn_dim);
  put("fold_count", fold_count);
  put("au_blocks", au_blocks);
  put("au_heads", au_heads);
  put("au_expand", au_expand);
  put("au_channels", au_channels);
  return out;
}

ModelSpec ModelSpec::from_text(const std::string& text, const std::string& origin) {
  ModelSpec s;
  for (const auto& [k, v] : parse_kv_text(text, origin)) {
    auto as_long = [&]() {
      try {
        return std::stol(v);
      } catch (...) {
        throw ConfigError(origin + ": model spec key '" + k + "' expects an integer, got '" + v + "'");
      }
    };
    if (k == "kind") {
      s.kind = v;
    } else if (k == "feat_dim") {
      s.feat_dim = as_long();
    } else if (k == "gru_layers") {
      s.gru_layers = as_long();
    } else if (k == "gru_hidden") {
      s.gru_hidden = as_long();
    } else if (k == "trf_blocks") {
      s.trf_blocks = as_long();
    } else if (k == "trf_heads") {
      s.trf_heads = as_long();
    } else if (k == "trf_ff") {
      s.trf_ff = as_long();
    } else if (k == "attn_window") {
      s.attn_window = as_long();
    } else if (k == "attn_dim") {
      s.attn_dim = as_long();
    } else if (k == "fold_count") {
      s.fold_count = as_long();
    } else if (k == "au_blocks") {
      s.au_blocks = as_long();
    } else if (k == "au_heads") {
      s.au_heads = as_long();
    } else if (k == "au_expand") {
      s.au_expand = as_long();
    } else if (k == "au_channels") {
      s.au_channels = as_long();
    } else {
      throw ConfigError(origin + ": unknown model spec key '" + k + "'");
    }
  }
  if (s.kind.empty() || s.feat_dim < 1) {
    throw ConfigError(origin + ": model spec missing kind or feat_dim");
  }
  return s;
}

ModelSpec make_model_spec(Task task, const TrainConfig& config, long feat_dim) {
  ModelSpec s;
  s.kind = task_name(task);
  s.feat_dim = task == Task::stage2 ? 2 * config.fold_count : feat_dim;
  s.gru_layers = config.gru_layers;
  s.gru_hidden = config.gru_hidden;
  s.trf_blocks = config.trf_blocks;
  s.trf_heads = config.trf_heads;
  s.trf_ff = config.trf_ff;
  s.attn_window = config.attn_window;
  s.attn_dim = config.attn_dim;
  s.fold_count = config.fold_count;
  s.au_blocks = config.au_blocks;
  s.au_heads = config.au_heads;
  s.au_expand = config.au_expand;
  return s;
}

void register_linear(NamedParams& out, const std::string& prefix, const LinearParams& p) {
  out.emplace_back(prefix + ".weight", p.weight);
  out.emplace_back(prefix + ".bias", p.bias);
}

void register_gru(NamedParams& out, const std::string& prefix,
                  const std::vector<GruLayerParams>& layers) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string base = prefix + "." + std::to_string(l) + ".";
    const GruLayerParams& p = layers[l];
    out.emplace_back(base + "w_update", p.w_update);
    out.emplace_back(base + "w_reset", p.w_reset);
    out.emplace_back(base + "w_cand", p.w_cand);
    out.emplace_back(base + "u_update", p.u_update);
    out.emplace_back(base + "u_reset", p.u_reset);
    out.emplace_back(base + "u_cand", p.u_cand);
    out.emplace_back(base + "b_update", p.b_update);
    out.emplace_back(base + "b_reset", p.b_reset);
    out.emplace_back(base + "b_cand", p.b_cand);
  }
}

void register_transformer(NamedParams& out, const std::string& prefix,
                          const std::vector<TransformerBlockParams>& blocks) {
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string base = prefix + "." + std::to_string(b) + ".";
    const TransformerBlockParams& p = blocks[b];
    for (std::size_t h = 0; h < p.w_query.size(); ++h) {
      const std::string head = base + "head" + std::to_string(h) + ".";
      out.emplace_back(head + "w_query", p.w_query[h]);
      out.emplace_back(head + "w_key", p.w_key[h]);
      out.emplace_back(head + "w_value", p.w_value[h]);
    }
    out.emplace_back(base + "w_out", p.w_out);
    out.emplace_back(base + "w_ffn_in", p.w_ffn_in);
    out.emplace_back(base + "w_ffn_out", p.w_ffn_out);
    out.emplace_back(base + "norm1_gain", p.norm1_gain);
    out.emplace_back(base + "norm1_bias", p.norm1_bias);
    out.emplace_back(base + "norm2_gain", p.norm2_gain);
    out.emplace_back(base + "norm2_bias", p.norm2_bias);
  }
}

void register_local_attention(NamedParams& out, const std::string& prefix,
                              const LocalAttentionParams& p) {
  out.emplace_back(prefix + ".w_query", p.w_query);
  out.emplace_back(prefix + ".w_key", p.w_key);
  out.emplace_back(prefix + ".w_value", p.w_value);
}

Stage1Model Stage1Model::build(const ModelSpec& spec, Rng& rng) {
  if (spec.kind != "stage1") throw ConfigError("Stage1Model: spec kind is '" + spec.kind + "'");
  if (spec.feat_dim < 1) throw ConfigError("Stage1Model: feat_dim must be positive");
  if (spec.trf_blocks < 1) throw ConfigError("Stage1Model: needs at least one transformer block");
  Stage1Model m;
  m.spec = spec;
  long d_in = spec.feat_dim;
  for (long l = 0; l < spec.gru_layers; ++l) {
    m.gru.push_back(GruLayerParams::init(d_in, spec.gru_hidden, rng));
    d_in = spec.gru_hidden;
  }
  const long d_ff = spec.trf_ff > 0 ? spec.trf_ff : 4 * spec.feat_dim;
  for (long b = 0; b < spec.trf_blocks; ++b) {
    m.blocks.push_back(TransformerBlockParams::init(spec.feat_dim, spec.trf_heads, d_ff, rng));
  }
  m.head_fused = LinearParams::init(spec.gru_hidden + spec.feat_dim, 2, rng);
  m.head_gru = LinearParams::init(spec.gru_hidden, 2, rng);
  m.head_trf = LinearParams::init(spec.feat_dim, 2, rng);
  return m;
}

Stage1Model::Heads Stage1Model::forward(const Tensor& x) const {
  if (x.rank() != 3 || x.dim(2) != spec.feat_dim) {
    throw DimensionError("Stage1Model: input must be [B,T," + std::to_string(spec.feat_dim) +
                         "], got " + x.shape_str());
  }
  Tensor gru_seq = gru_forward(gru, x).sequence;

  Tensor trf_seq = add_positions(x);
  for (const auto& block : blocks) trf_seq = transformer_block_forward(block, trf_seq);

  Tensor fused = concat_last({gru_seq, trf_seq});
  Heads heads;
  heads.fused = va_head_forward(head_fused, fused);
  heads.gru_head = va_head_forward(head_gru, gru_seq);
  heads.trf_head = va_head_forward(head_trf, trf_seq);
  return heads;
}

NamedParams Stage1Model::named_params() const {
  NamedParams out;
  register_gru(out, "gru", gru);
  register_transformer(out, "trf", blocks);
  register_linear(out, "head_fused", head_fused);
  register_linear(out, "head_gru", head_gru);
  register_linear(out, "head_trf", head_trf);
  return out;
}

}  // namespace affect
