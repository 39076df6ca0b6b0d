// SPDX-License-Identifier: Apache-2.0
#include "affect/grad_suite.hpp"

#include <functional>

#include "affect/au_model.hpp"
#include "affect/ensemble.hpp"
#include "affect/grad_check.hpp"
#include "affect/layers.hpp"
#include "affect/metrics.hpp"
#include "affect/models.hpp"

namespace affect {

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(shape, std::move(v));
}

// Max relative error over the input and every parameter, with the output
// contracted against a fixed random projection.
double sweep(const std::function<Tensor()>& forward, Tensor& input, NamedParams params, Rng& rng,
             double eps = 1e-5) {
  Tensor probe = forward();
  Tensor weights = random_tensor(probe.shape(), rng);
  auto scalar_fn = [&forward, &weights]() { return sum_all(mul(forward(), weights)); };

  double worst = grad_check(scalar_fn, input, eps);
  for (auto& [name, tensor] : params) {
    (void)name;
    Tensor t = tensor;  // shared handle; grad_check perturbs in place
    worst = std::max(worst, grad_check(scalar_fn, t, eps));
  }
  return worst;
}

}  // namespace

std::vector<GradCheckCase> run_grad_check_suite(std::uint64_t seed) {
  std::vector<GradCheckCase> cases;
  Rng rng(seed);
  auto add_case = [&cases](const std::string& name, double err, double tol) {
    cases.push_back({name, err, tol, err <= tol});
  };

  // GRU stacks, 1 through 4 layers.
  for (long depth = 1; depth <= 4; ++depth) {
    const long d_in = 5, d_h = 6;
    std::vector<GruLayerParams> layers;
    long in = d_in;
    for (long l = 0; l < depth; ++l) {
      layers.push_back(GruLayerParams::init(in, d_h, rng));
      in = d_h;
    }
    Tensor x = random_tensor({2, 6, d_in}, rng);
    NamedParams params;
    register_gru(params, "gru", layers);
    auto fwd = [&layers, &x]() { return gru_forward(layers, x).sequence; };
    add_case("gru_" + std::to_string(depth) + "_layer", sweep(fwd, x, params, rng), 1e-4);
  }

  // Transformer encoder block.
  {
    const long d = 8, heads = 2, d_ff = 16;
    TransformerBlockParams block = TransformerBlockParams::init(d, heads, d_ff, rng);
    Tensor x = random_tensor({2, 6, d}, rng);
    NamedParams params;
    register_transformer(params, "trf", {block});
    auto fwd = [&block, &x]() { return transformer_block_forward(block, x); };
    add_case("transformer_block", sweep(fwd, x, params, rng), 1e-4);
  }

  // Local attention at several window radii.
  for (long w : {0L, 2L, 5L}) {
    const long d = 6;
    LocalAttentionParams attn = LocalAttentionParams::init(d, d, w, rng);
    Tensor x = random_tensor({2, 7, d}, rng);
    NamedParams params;
    register_local_attention(params, "attn", attn);
    auto fwd = [&attn, &x]() { return local_attention_forward(attn, x); };
    add_case("local_attention_w" + std::to_string(w), sweep(fwd, x, params, rng), 1e-4);
  }

  // Bounded valence/arousal head.
  {
    LinearParams head = LinearParams::init(7, 2, rng);
    Tensor x = random_tensor({2, 5, 7}, rng);
    NamedParams params;
    register_linear(params, "head", head);
    auto fwd = [&head, &x]() { return va_head_forward(head, x); };
    add_case("va_head", sweep(fwd, x, params, rng), 1e-4);
  }

  // Dual-branch AU detector (both branches and all heads in one graph).
  {
    ModelSpec spec;
    spec.kind = "au";
    spec.feat_dim = 6;
    spec.au_blocks = 1;
    spec.au_heads = 2;
    spec.au_expand = 8;
    spec.trf_ff = 12;
    AuModel model = AuModel::build(spec, rng);
    Tensor x = random_tensor({2, 5, 6}, rng);
    auto fwd = [&model, &x]() { return model.forward(x).probs; };
    add_case("au_dual_branch", sweep(fwd, x, model.named_params(), rng), 1e-4);
  }

  // CCC loss over random length-16 sequences.
  {
    Tensor pred_v = random_tensor({16}, rng);
    Tensor pred_a = random_tensor({16}, rng);
    Tensor label_v = random_tensor({16}, rng);
    Tensor label_a = random_tensor({16}, rng);
    Tensor both = concat_last({reshape(pred_v, {16, 1}), reshape(pred_a, {16, 1})});
    // Check through a single [16,2] input so one sweep covers both channels.
    auto fwd = [&both, &label_v, &label_a]() {
      return ccc_loss(slice_last(both, 0, 1), slice_last(both, 1, 1), label_v, label_a);
    };
    Tensor input = both;
    NamedParams none;
    add_case("ccc_loss", sweep(fwd, input, none, rng), 1e-4);
  }

  // Focal loss away from the probability clamp.
  {
    Tensor prob = random_tensor({4, 12}, rng, 0.05, 0.95);
    std::vector<double> bits(4 * 12);
    for (auto& b : bits) b = rng.next_unit() < 0.35 ? 1.0 : 0.0;
    Tensor target = Tensor::from_data({4, 12}, std::move(bits));
    auto fwd = [&prob, &target]() { return focal_loss(prob, target, 2.0, 0.25); };
    add_case("focal_loss", sweep(fwd, prob, {}, rng), 1e-4);
  }

  return cases;
}

}  // namespace affect
