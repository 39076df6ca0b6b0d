// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "affect/rng.hpp"
#include "affect/tensor.hpp"

namespace affect {

/// Affine map over the last axis.
struct LinearParams {
  Tensor weight;  // [d_in, d_out]
  Tensor bias;    // [d_out]

  static LinearParams init(long d_in, long d_out, Rng& rng, bool requires_grad = true);
  long in_dim() const { return weight.dim(0); }
  long out_dim() const { return weight.dim(1); }
};

Tensor linear_forward(const LinearParams& p, const Tensor& x);
/// Linear followed by tanh; valence/arousal heads are bounded to [-1, 1].
Tensor va_head_forward(const LinearParams& p, const Tensor& x);

/**
 * One GRU layer. Gate convention: the update gate interpolates toward the
 * candidate state,
 *   z = sigmoid(x W_z + h U_z + b_z)
 *   r = sigmoid(x W_r + h U_r + b_r)
 *   c = tanh(x W_c + (r . h) U_c + b_c)
 *   h' = (1 - z) . h + z . c
 */
struct GruLayerParams {
  Tensor w_update, w_reset, w_cand;  // [d_in, d_h]
  Tensor u_update, u_reset, u_cand;  // [d_h, d_h]
  Tensor b_update, b_reset, b_cand;  // [d_h]

  static GruLayerParams init(long d_in, long d_h, Rng& rng, bool requires_grad = true);
  long input_dim() const { return w_update.dim(0); }
  long hidden_dim() const { return w_update.dim(1); }
};

struct GruOutput {
  Tensor sequence;     // [B, T, d_h], top layer
  Tensor last_hidden;  // [L, B, d_h]
};

/// Stacked GRU over x: [B, T, d_in]. h0: [L, B, d_h], zeros when undefined.
GruOutput gru_forward(const std::vector<GruLayerParams>& layers, const Tensor& x,
                      const Tensor& h0 = {});

/**
 * Pre-norm Transformer encoder block:
 *   a = x + MultiHeadAttention(LayerNorm(x))
 *   y = a + FeedForward(LayerNorm(a))
 * Attention is scaled dot-product over the full sequence, bidirectional.
 * Positional encoding is the caller's concern (added before the first block).
 */
struct TransformerBlockParams {
  std::vector<Tensor> w_query, w_key, w_value;  // per head, [d, d_head]
  Tensor w_out;                                 // [H * d_head, d]
  Tensor w_ffn_in;                              // [d, d_ff]
  Tensor w_ffn_out;                             // [d_ff, d]
  Tensor norm1_gain, norm1_bias;                // [d]
  Tensor norm2_gain, norm2_bias;                // [d]

  static TransformerBlockParams init(long d, long heads, long d_ff, Rng& rng,
                                     bool requires_grad = true);
  long model_dim() const { return w_out.dim(1); }
  long head_count() const { return static_cast<long>(w_query.size()); }
};

Tensor transformer_block_forward(const TransformerBlockParams& p, const Tensor& x);

/// Sinusoidal positional table, [T, d].
Tensor sinusoidal_positions(long t_len, long d);
/// x + positional table, broadcast over the batch axis. x: [B, T, d].
Tensor add_positions(const Tensor& x);

/**
 * Windowed scaled-dot-product self-attention with a residual connection:
 *   out_t = x_t + sum_{|t-s| <= w} alpha_{t,s} (x_s W_V)
 * alpha is a softmax over the window of (x_t W_Q)(x_s W_K)^T / sqrt(d_a).
 */
struct LocalAttentionParams {
  long window = 5;        // radius w, in frames
  Tensor w_query, w_key;  // [d, d_a]
  Tensor w_value;         // [d, d]

  static LocalAttentionParams init(long d, long d_attn, long window, Rng& rng,
                                   bool requires_grad = true);
  long model_dim() const { return w_value.dim(0); }
  long attn_dim() const { return w_query.dim(1); }
};

Tensor local_attention_forward(const LocalAttentionParams& p, const Tensor& x);

struct LocalAttentionTrace {
  Tensor output;   // [B, T, d]
  Tensor weights;  // [B, T, T], zero outside the window
};
LocalAttentionTrace local_attention_forward_traced(const LocalAttentionParams& p, const Tensor& x);

}  // namespace affect
