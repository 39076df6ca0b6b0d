// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "affect/au_model.hpp"
#include "affect/error.hpp"
#include "affect/metrics.hpp"
#include "oracles.hpp"

using namespace affect;

namespace {

ModelSpec small_spec() {
  ModelSpec spec;
  spec.kind = "au";
  spec.feat_dim = 6;
  spec.au_blocks = 1;
  spec.au_heads = 2;
  spec.au_expand = 10;
  spec.trf_ff = 12;
  return spec;
}

Tensor random_input(Rng& rng, long b = 2, long t = 5, long d = 6) {
  std::vector<double> v(b * t * d);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from_data({b, t, d}, std::move(v));
}

void zero_tensor(Tensor t) {
  for (auto& v : t.mutable_data()) v = 0.0;
}

}  // namespace

TEST_CASE("au model output shapes and head fusion") {
  Rng rng(1);
  AuModel model = AuModel::build(small_spec(), rng);
  Tensor x = random_input(rng);
  AuModel::Out out = model.forward(x);
  CHECK(out.probs.shape() == Shape{2, 5, 12});
  CHECK(out.probs_t1.shape() == Shape{2, 5, 12});

  SUBCASE("probabilities lie strictly inside (0,1)") {
    for (double p : out.probs.data()) {
      CHECK(p > 0.0);
      CHECK(p < 1.0);
    }
  }
  SUBCASE("fused logits are the arithmetic mean of the three heads") {
    for (long i = 0; i < out.mean_logits.numel(); ++i) {
      const double mean =
          (out.logits_t1.data()[i] + out.logits_t2.data()[i] + out.logits_joint.data()[i]) / 3.0;
      CHECK(out.mean_logits.data()[i] == doctest::Approx(mean).epsilon(1e-12));
    }
  }
}

TEST_CASE("zero-initialized heads emit probability one half") {
  Rng rng(2);
  AuModel model = AuModel::build(small_spec(), rng);
  zero_tensor(model.head_t1.weight);
  zero_tensor(model.head_t1.bias);
  zero_tensor(model.head_t2.weight);
  zero_tensor(model.head_t2.bias);
  zero_tensor(model.head_joint.weight);
  zero_tensor(model.head_joint.bias);
  AuModel::Out out = model.forward(random_input(rng));
  for (double p : out.probs.data()) CHECK(p == 0.5);
}

TEST_CASE("ablated branch equals the T1 path of the full forward exactly") {
  Rng rng(3);
  AuModel model = AuModel::build(small_spec(), rng);
  Tensor x = random_input(rng);
  Tensor ablated = model.ablate_t1(x);
  AuModel::Out out = model.forward(x);
  REQUIRE(ablated.numel() == out.probs_t1.numel());
  for (long i = 0; i < ablated.numel(); ++i) {
    CHECK(ablated.data()[i] == out.probs_t1.data()[i]);
  }

  SUBCASE("zeroing the T2 branch does not disturb the equality") {
    NamedParams params = model.named_params();
    for (auto& [name, t] : params) {
      if (name.rfind("t2.", 0) == 0 || name.rfind("expand.", 0) == 0 ||
          name.rfind("compress.", 0) == 0) {
        zero_tensor(t);
      }
    }
    AuModel::Out zeroed = model.forward(x);
    Tensor ablated2 = model.ablate_t1(x);
    for (long i = 0; i < ablated2.numel(); ++i) {
      CHECK(zeroed.probs_t1.data()[i] == ablated2.data()[i]);
    }
  }
}

TEST_CASE("expansion must exceed the source width") {
  ModelSpec bad = small_spec();
  bad.au_expand = 6;  // == d
  Rng rng(4);
  CHECK_THROWS_AS(AuModel::build(bad, rng), ConfigError);
  bad.au_expand = 4;  // < d
  CHECK_THROWS_AS(AuModel::build(bad, rng), ConfigError);
}

TEST_CASE("au_predict thresholding") {
  SUBCASE("0.5 maps to 1 under the >= convention") {
    CHECK(au_predict({0.5}, 0.5) == std::vector<std::uint8_t>{1});
    CHECK(au_predict({0.4999}, 0.5) == std::vector<std::uint8_t>{0});
  }
  SUBCASE("threshold 0 turns everything on") {
    auto bits = au_predict({0.0, 0.2, 0.9}, 0.0);
    CHECK(bits == std::vector<std::uint8_t>{1, 1, 1});
  }
  SUBCASE("probabilities outside [0,1] are rejected") {
    CHECK_THROWS_AS(au_predict({1.2}, 0.5), ContractError);
    CHECK_THROWS_AS(au_predict({-0.1}, 0.5), ContractError);
  }
  SUBCASE("F1 is recomputable across a threshold sweep") {
    Rng rng(5);
    std::vector<double> probs(40 * 12);
    std::vector<std::uint8_t> target(40 * 12);
    for (auto& p : probs) p = rng.next_unit();
    for (auto& t : target) t = rng.next_unit() < 0.4 ? 1 : 0;
    for (double thr : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      auto bits = au_predict(probs, thr);
      const double lib = f1_macro(bits, target, 12);
      CHECK(lib == oracle::f1_macro_counted(bits, target, 12));
    }
  }
}
