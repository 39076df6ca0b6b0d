// SPDX-License-Identifier: Apache-2.0
#include "affect/au_model.hpp"

#include "affect/error.hpp"

namespace affect {

long AuModel::expanded_dim() const {
  return spec.au_expand > 0 ? spec.au_expand : 2 * spec.feat_dim;
}

AuModel AuModel::build(const ModelSpec& spec, Rng& rng) {
  if (spec.kind != "au") throw ConfigError("AuModel: spec kind is '" + spec.kind + "'");
  if (spec.feat_dim < 1) throw ConfigError("AuModel: feat_dim must be positive");
  const long d = spec.feat_dim;
  const long d_e = spec.au_expand > 0 ? spec.au_expand : 2 * d;
  if (d_e <= d) {
    throw ConfigError("AuModel: expanded dim " + std::to_string(d_e) +
                      " must exceed the source dim " + std::to_string(d));
  }
  AuModel m;
  m.spec = spec;
  const long ff1 = spec.trf_ff > 0 ? spec.trf_ff : 4 * d;
  const long ff2 = spec.trf_ff > 0 ? spec.trf_ff : 4 * d_e;
  for (long b = 0; b < spec.au_blocks; ++b) {
    m.t1.push_back(TransformerBlockParams::init(d, spec.au_heads, ff1, rng));
  }
  m.expand = LinearParams::init(d, d_e, rng);
  for (long b = 0; b < spec.au_blocks; ++b) {
    m.t2.push_back(TransformerBlockParams::init(d_e, spec.au_heads, ff2, rng));
  }
  m.compress = LinearParams::init(d_e, d, rng);
  m.head_t1 = LinearParams::init(d, spec.au_channels, rng);
  m.head_t2 = LinearParams::init(d, spec.au_channels, rng);
  m.head_joint = LinearParams::init(2 * d, spec.au_channels, rng);
  return m;
}

namespace {

Tensor t1_branch(const AuModel& m, const Tensor& x) {
  Tensor h = add_positions(x);
  for (const auto& block : m.t1) h = transformer_block_forward(block, h);
  return h;
}

}  // namespace

AuModel::Out AuModel::forward(const Tensor& x) const {
  if (x.rank() != 3 || x.dim(2) != spec.feat_dim) {
    throw DimensionError("AuModel: input must be [B,T," + std::to_string(spec.feat_dim) +
                         "], got " + x.shape_str());
  }
  Out out;
  Tensor h1 = t1_branch(*this, x);
  out.logits_t1 = linear_forward(head_t1, h1);

  Tensor h2 = add_positions(linear_forward(expand, x));
  for (const auto& block : t2) h2 = transformer_block_forward(block, h2);
  Tensor compressed = linear_forward(compress, h2);
  out.logits_t2 = linear_forward(head_t2, compressed);

  out.logits_joint = linear_forward(head_joint, concat_last({h1, compressed}));

  out.mean_logits = scale(out.logits_t1 + out.logits_t2 + out.logits_joint, 1.0 / 3.0);
  out.probs = sigmoid(out.mean_logits);
  out.probs_t1 = sigmoid(out.logits_t1);
  out.probs_t2 = sigmoid(out.logits_t2);
  out.probs_joint = sigmoid(out.logits_joint);
  return out;
}

Tensor AuModel::ablate_t1(const Tensor& x) const {
  if (x.rank() != 3 || x.dim(2) != spec.feat_dim) {
    throw DimensionError("AuModel: input must be [B,T," + std::to_string(spec.feat_dim) +
                         "], got " + x.shape_str());
  }
  return sigmoid(linear_forward(head_t1, t1_branch(*this, x)));
}

NamedParams AuModel::named_params() const {
  NamedParams out;
  register_transformer(out, "t1", t1);
  register_linear(out, "expand", expand);
  register_transformer(out, "t2", t2);
  register_linear(out, "compress", compress);
  register_linear(out, "head_t1", head_t1);
  register_linear(out, "head_t2", head_t2);
  register_linear(out, "head_joint", head_joint);
  return out;
}

std::vector<std::uint8_t> au_predict(const std::vector<double>& probs, double threshold) {
  std::vector<std::uint8_t> bits(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (!(p >= 0.0 && p <= 1.0)) {
      throw ContractError("au_predict: probability " + std::to_string(p) + " outside [0, 1]");
    }
    bits[i] = p >= threshold ? 1 : 0;
  }
  return bits;
}

}  // namespace affect
