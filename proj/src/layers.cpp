// SPDX-License-Identifier: Apache-2.0
#include "affect/layers.hpp"

#include <cmath>

#include "affect/error.hpp"

namespace affect {

namespace {

// uniform(-sqrt(1/d_in), +sqrt(1/d_in)), biases zero
Tensor init_weight(long d_in, long d_out, Rng& rng, bool requires_grad) {
  const double bound = std::sqrt(1.0 / static_cast<double>(d_in));
  std::vector<double> w(d_in * d_out);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  return Tensor::from_data({d_in, d_out}, std::move(w), requires_grad);
}

}  // namespace

LinearParams LinearParams::init(long d_in, long d_out, Rng& rng, bool requires_grad) {
  LinearParams p;
  p.weight = init_weight(d_in, d_out, rng, requires_grad);
  p.bias = Tensor::zeros({d_out}, requires_grad);
  return p;
}

Tensor linear_forward(const LinearParams& p, const Tensor& x) {
  return add_bias(matmul(x, p.weight), p.bias);
}

Tensor va_head_forward(const LinearParams& p, const Tensor& x) {
  return tanh(linear_forward(p, x));
}

GruLayerParams GruLayerParams::init(long d_in, long d_h, Rng& rng, bool requires_grad) {
  GruLayerParams p;
  p.w_update = init_weight(d_in, d_h, rng, requires_grad);
  p.w_reset = init_weight(d_in, d_h, rng, requires_grad);
  p.w_cand = init_weight(d_in, d_h, rng, requires_grad);
  p.u_update = init_weight(d_h, d_h, rng, requires_grad);
  p.u_reset = init_weight(d_h, d_h, rng, requires_grad);
  p.u_cand = init_weight(d_h, d_h, rng, requires_grad);
  p.b_update = Tensor::zeros({d_h}, requires_grad);
  p.b_reset = Tensor::zeros({d_h}, requires_grad);
  p.b_cand = Tensor::zeros({d_h}, requires_grad);
  return p;
}

GruOutput gru_forward(const std::vector<GruLayerParams>& layers, const Tensor& x,
                      const Tensor& h0) {
  if (layers.empty()) throw ContractError("gru_forward: no layers");
  if (x.rank() != 3) throw DimensionError("gru_forward: input must be [B,T,d], got " + x.shape_str());
  const long B = x.dim(0), T = x.dim(1);
  const long L = static_cast<long>(layers.size());
  const long d_h = layers[0].hidden_dim();
  if (T == 0) throw ContractError("gru_forward: empty sequence (T == 0)");
  if (x.dim(2) != layers[0].input_dim()) {
    throw DimensionError("gru_forward: input dim " + std::to_string(x.dim(2)) +
                         " != layer-0 input dim " + std::to_string(layers[0].input_dim()));
  }
  if (h0.defined()) {
    if (h0.rank() != 3 || h0.dim(0) != L || h0.dim(1) != B || h0.dim(2) != d_h) {
      throw DimensionError("gru_forward: h0 must be [L,B,d_h]=[" + std::to_string(L) + "," +
                           std::to_string(B) + "," + std::to_string(d_h) + "], got " +
                           h0.shape_str());
    }
  }

  const Tensor one = Tensor::scalar(1.0);
  Tensor layer_in = x;
  std::vector<Tensor> finals;
  finals.reserve(L);
  for (long l = 0; l < L; ++l) {
    const GruLayerParams& p = layers[l];
    Tensor h = h0.defined() ? select_axis0(h0, l) : Tensor::zeros({B, d_h});
    std::vector<Tensor> outputs;
    outputs.reserve(T);
    for (long t = 0; t < T; ++t) {
      Tensor xt = select_time(layer_in, t);
      Tensor z = sigmoid(add_bias(matmul(xt, p.w_update) + matmul(h, p.u_update), p.b_update));
      Tensor r = sigmoid(add_bias(matmul(xt, p.w_reset) + matmul(h, p.u_reset), p.b_reset));
      Tensor c = tanh(add_bias(matmul(xt, p.w_cand) + matmul(r * h, p.u_cand), p.b_cand));
      h = (one - z) * h + z * c;
      outputs.push_back(h);
    }
    layer_in = stack_time(outputs);
    finals.push_back(h);
  }
  return {layer_in, stack_axis0(finals)};
}

TransformerBlockParams TransformerBlockParams::init(long d, long heads, long d_ff, Rng& rng,
                                                    bool requires_grad) {
  if (heads < 1 || d % heads != 0) {
    throw ConfigError("transformer: model dim " + std::to_string(d) +
                      " not divisible by head count " + std::to_string(heads));
  }
  if (d_ff < d) {
    throw ConfigError("transformer: d_ff " + std::to_string(d_ff) + " must be >= model dim " +
                      std::to_string(d));
  }
  const long d_head = d / heads;
  TransformerBlockParams p;
  for (long h = 0; h < heads; ++h) {
    p.w_query.push_back(init_weight(d, d_head, rng, requires_grad));
    p.w_key.push_back(init_weight(d, d_head, rng, requires_grad));
    p.w_value.push_back(init_weight(d, d_head, rng, requires_grad));
  }
  p.w_out = init_weight(d, d, rng, requires_grad);
  p.w_ffn_in = init_weight(d, d_ff, rng, requires_grad);
  p.w_ffn_out = init_weight(d_ff, d, rng, requires_grad);
  p.norm1_gain = Tensor::full({d}, 1.0, requires_grad);
  p.norm1_bias = Tensor::zeros({d}, requires_grad);
  p.norm2_gain = Tensor::full({d}, 1.0, requires_grad);
  p.norm2_bias = Tensor::zeros({d}, requires_grad);
  return p;
}

Tensor transformer_block_forward(const TransformerBlockParams& p, const Tensor& x) {
  if (x.rank() != 3) {
    throw DimensionError("transformer_block_forward: input must be [B,T,d], got " + x.shape_str());
  }
  const long d = p.model_dim();
  if (x.dim(2) != d) {
    throw DimensionError("transformer_block_forward: input dim " + std::to_string(x.dim(2)) +
                         " != model dim " + std::to_string(d));
  }
  const long heads = p.head_count();
  const long d_head = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));

  Tensor normed = layer_norm(x, p.norm1_gain, p.norm1_bias);
  std::vector<Tensor> contexts;
  contexts.reserve(heads);
  for (long h = 0; h < heads; ++h) {
    Tensor q = matmul(normed, p.w_query[h]);
    Tensor k = matmul(normed, p.w_key[h]);
    Tensor v = matmul(normed, p.w_value[h]);
    Tensor alpha = softmax_last(scale(bmm(q, k, /*transpose_b=*/true), inv_sqrt));
    contexts.push_back(bmm(alpha, v));
  }
  Tensor attended = x + matmul(concat_last(contexts), p.w_out);

  Tensor normed2 = layer_norm(attended, p.norm2_gain, p.norm2_bias);
  Tensor ffn = matmul(relu(matmul(normed2, p.w_ffn_in)), p.w_ffn_out);
  return attended + ffn;
}

Tensor sinusoidal_positions(long t_len, long d) {
  std::vector<double> table(t_len * d);
  for (long t = 0; t < t_len; ++t) {
    for (long i = 0; i < d; ++i) {
      const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
      const double angle = static_cast<double>(t) / std::pow(10000.0, exponent);
      table[t * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from_data({t_len, d}, std::move(table));
}

Tensor add_positions(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("add_positions: input must be [B,T,d], got " + x.shape_str());
  const long B = x.dim(0), T = x.dim(1), d = x.dim(2);
  Tensor table = sinusoidal_positions(T, d);
  std::vector<double> tiled(B * T * d);
  for (long b = 0; b < B; ++b) {
    std::copy_n(table.data().data(), T * d, tiled.data() + b * T * d);
  }
  return x + Tensor::from_data({B, T, d}, std::move(tiled));
}

LocalAttentionParams LocalAttentionParams::init(long d, long d_attn, long window, Rng& rng,
                                                bool requires_grad) {
  if (window < 0) throw ConfigError("local attention: window radius must be >= 0");
  LocalAttentionParams p;
  p.window = window;
  p.w_query = init_weight(d, d_attn, rng, requires_grad);
  p.w_key = init_weight(d, d_attn, rng, requires_grad);
  p.w_value = init_weight(d, d, rng, requires_grad);
  return p;
}

namespace {

Tensor band_mask(long B, long T, long w) {
  std::vector<double> m(B * T * T, 0.0);
  for (long t = 0; t < T; ++t) {
    const long lo = std::max(0L, t - w);
    const long hi = std::min(T - 1, t + w);
    for (long s = lo; s <= hi; ++s) m[t * T + s] = 1.0;
  }
  for (long b = 1; b < B; ++b) std::copy_n(m.data(), T * T, m.data() + b * T * T);
  return Tensor::from_data({B, T, T}, std::move(m));
}

LocalAttentionTrace local_attention_impl(const LocalAttentionParams& p, const Tensor& x) {
  if (x.rank() != 3) {
    throw DimensionError("local_attention_forward: input must be [B,T,d], got " + x.shape_str());
  }
  if (x.dim(2) != p.model_dim()) {
    throw DimensionError("local_attention_forward: input dim " + std::to_string(x.dim(2)) +
                         " != model dim " + std::to_string(p.model_dim()));
  }
  const long B = x.dim(0), T = x.dim(1);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(p.attn_dim()));

  Tensor q = matmul(x, p.w_query);
  Tensor k = matmul(x, p.w_key);
  Tensor scores = scale(bmm(q, k, /*transpose_b=*/true), inv_sqrt);
  Tensor alpha = softmax_last_masked(scores, band_mask(B, T, p.window));
  Tensor v = matmul(x, p.w_value);
  return {x + bmm(alpha, v), alpha};
}

}  // namespace

Tensor local_attention_forward(const LocalAttentionParams& p, const Tensor& x) {
  return local_attention_impl(p, x).output;
}

LocalAttentionTrace local_attention_forward_traced(const LocalAttentionParams& p, const Tensor& x) {
  return local_attention_impl(p, x);
}

}  // namespace affect
