// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "affect/error.hpp"
#include "affect/grad_check.hpp"
#include "affect/metrics.hpp"
#include "affect/rng.hpp"
#include "oracles.hpp"

using namespace affect;

namespace {

std::vector<double> random_seq(long n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace

TEST_CASE("ccc basic identities") {
  SUBCASE("perfect concordance is exactly 1") {
    std::vector<double> y{0.1, -0.4, 0.7, 0.2, -0.9};
    CHECK(ccc(y, y) == 1.0);
  }
  SUBCASE("anti-correlated zero-mean is exactly -1") {
    std::vector<double> y{1.0, -1.0, 2.0, -2.0};
    std::vector<double> p{-1.0, 1.0, -2.0, 2.0};
    CHECK(ccc(p, y) == -1.0);
  }
  SUBCASE("worked example: 2*0.1 / (0.05 + 0.25 + 0)") {
    std::vector<double> label{0.0, 1.0, 1.0, 0.0};
    std::vector<double> pred{0.2, 0.8, 0.6, 0.4};
    const double expected = oracle::ccc_two_pass(pred, label);
    CHECK(expected == doctest::Approx(2.0 * 0.1 / 0.3).epsilon(1e-12));
    CHECK(ccc(pred, label) == doctest::Approx(0.6666666666666666).epsilon(1e-12));
    CHECK(std::abs(ccc(pred, label) - expected) <= 1e-15);
  }
  SUBCASE("constant sequences give 0, not NaN") {
    std::vector<double> c{0.5, 0.5, 0.5};
    CHECK(ccc(c, c) == 0.0);
  }
  SUBCASE("length contract") {
    CHECK_THROWS_AS(ccc({1.0, 2.0}, {1.0}), ContractError);
    CHECK_THROWS_AS(ccc({1.0}, {1.0}), ContractError);
  }
}

TEST_CASE("ccc properties against the scalar oracle") {
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const long n = 2 + static_cast<long>(rng.below(199));
    std::vector<double> pred = random_seq(n, rng);
    std::vector<double> label = random_seq(n, rng);
    const double lib = ccc(pred, label);
    CHECK(std::abs(lib - oracle::ccc_two_pass(pred, label)) <= 1e-9);
    CHECK(ccc(label, pred) == lib);  // bitwise symmetric
    CHECK(std::abs(lib) <= 1.0);
  }
}

TEST_CASE("affine distortions keep ccc below 1") {
  Rng rng(78);
  std::vector<double> label = random_seq(50, rng);
  std::vector<double> scaled(label.size()), shifted(label.size());
  for (std::size_t i = 0; i < label.size(); ++i) {
    scaled[i] = 1.7 * label[i];
    shifted[i] = label[i] + 0.4;
  }
  CHECK(ccc(scaled, label) < 1.0);
  CHECK(ccc(shifted, label) < 1.0);
  CHECK(ccc(scaled, label) > 0.0);
}

TEST_CASE("moments summary is self-consistent") {
  Rng rng(79);
  std::vector<double> pred = random_seq(64, rng);
  std::vector<double> label = random_seq(64, rng);
  const MomentSummary m = moments(pred, label);
  CHECK(m.covariance ==
        doctest::Approx(m.pearson * m.std_pred * m.std_label).epsilon(1e-12));
}

TEST_CASE("va_combined anchors") {
  // Mean of (0.31, 0.17) is exactly 0.24.
  CHECK(va_combined(0.31, 0.17) == doctest::Approx(0.24).epsilon(1e-15));
  // 0.437 and 0.576 average to 0.5065, which prints as 0.507
  // (three decimals, half rounded up).
  const double best = va_combined(0.437, 0.576);
  CHECK(best == doctest::Approx(0.5065).epsilon(1e-12));
  CHECK(std::abs(best - 0.507) <= 5.0001e-4);
  CHECK(va_combined(0.42, 0.42) == 0.42);
}

TEST_CASE("ccc_loss") {
  Rng rng(80);
  SUBCASE("perfect prediction gives zero loss") {
    std::vector<double> v = random_seq(16, rng);
    std::vector<double> a = random_seq(16, rng);
    Tensor pv = Tensor::from_data({16}, v);
    Tensor pa = Tensor::from_data({16}, a);
    Tensor loss = ccc_loss(pv, pa, Tensor::from_data({16}, v), Tensor::from_data({16}, a));
    CHECK(std::abs(loss.item()) <= 1e-12);
  }
  SUBCASE("anti-correlated zero-mean prediction gives loss 2") {
    std::vector<double> y{0.5, -0.5, 0.25, -0.25};
    std::vector<double> p{-0.5, 0.5, -0.25, 0.25};
    Tensor loss = ccc_loss(Tensor::from_data({4}, p), Tensor::from_data({4}, p),
                           Tensor::from_data({4}, y), Tensor::from_data({4}, y));
    CHECK(loss.item() == doctest::Approx(2.0).epsilon(1e-14));
  }
  SUBCASE("gradient passes the finite-difference oracle at 1e-5") {
    Tensor pv = Tensor::from_data({16}, random_seq(16, rng));
    Tensor pa = Tensor::from_data({16}, random_seq(16, rng));
    Tensor lv = Tensor::from_data({16}, random_seq(16, rng));
    Tensor la = Tensor::from_data({16}, random_seq(16, rng));
    auto fn = [&]() { return ccc_loss(pv, pa, lv, la); };
    CHECK(grad_check(fn, pv, 1e-5) <= 1e-5);
    CHECK(grad_check(fn, pa, 1e-5) <= 1e-5);
  }
  SUBCASE("constant labels trip the denominator guard instead of dividing by zero") {
    const long before = ccc_guard_count();
    Tensor pv = Tensor::full({8}, 0.3);
    Tensor lv = Tensor::full({8}, 0.3);
    Tensor loss = ccc_loss(pv, pv, lv, lv);
    CHECK(std::isfinite(loss.item()));
    CHECK(ccc_guard_count() > before);
  }
  SUBCASE("loss and metric agree: 1 - loss == combined ccc") {
    std::vector<double> pv = random_seq(32, rng), pa = random_seq(32, rng);
    std::vector<double> lv = random_seq(32, rng), la = random_seq(32, rng);
    Tensor loss = ccc_loss(Tensor::from_data({32}, pv), Tensor::from_data({32}, pa),
                           Tensor::from_data({32}, lv), Tensor::from_data({32}, la));
    const CccResult r = ccc_va(pv, pa, lv, la);
    CHECK(1.0 - loss.item() == doctest::Approx(r.combined).epsilon(1e-12));
  }
}

TEST_CASE("stage1 combined loss") {
  Rng rng(81);
  auto rand2 = [&rng](long n) {
    std::vector<double> v(n * 2);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from_data({n, 2}, std::move(v));
  };
  Tensor labels = rand2(24);
  SUBCASE("all heads perfect gives zero") {
    Tensor perfect = labels.clone();
    Tensor loss = stage1_combined_loss(perfect, perfect, perfect, labels);
    CHECK(std::abs(loss.item()) <= 1e-12);
  }
  SUBCASE("zero branch weights reduce to the fused term") {
    Tensor f = rand2(24), g = rand2(24), t = rand2(24);
    Tensor full = stage1_combined_loss(f, g, t, labels, {1.0, 0.0, 0.0});
    Tensor fused_only = ccc_loss(slice_last(f, 0, 1), slice_last(f, 1, 1),
                                 slice_last(labels, 0, 1), slice_last(labels, 1, 1));
    CHECK(full.item() == doctest::Approx(fused_only.item()).epsilon(1e-15));
  }
  SUBCASE("weighted sum matches independently computed components") {
    Tensor f = rand2(24), g = rand2(24), t = rand2(24);
    const Stage1LossWeights w{0.7, 1.3, 0.4};
    Tensor total = stage1_combined_loss(f, g, t, labels, w);
    auto head = [&labels](const Tensor& p) {
      return ccc_loss(slice_last(p, 0, 1), slice_last(p, 1, 1), slice_last(labels, 0, 1),
                      slice_last(labels, 1, 1))
          .item();
    };
    const double expected = w.fused * head(f) + w.gru * head(g) + w.transformer * head(t);
    CHECK(total.item() == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("focal loss") {
  SUBCASE("gamma=0, alpha=1 is binary cross-entropy; -ln(0.5) at p_t=0.5") {
    Tensor prob = Tensor::from_data({1, 2}, {0.5, 0.5});
    Tensor target = Tensor::from_data({1, 2}, {1.0, 0.0});
    CHECK(focal_loss(prob, target, 0.0, 1.0).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("a confident correct prediction contributes almost nothing") {
    Tensor prob = Tensor::from_data({1, 1}, {1.0});  // clamps to 1 - 1e-7
    Tensor target = Tensor::from_data({1, 1}, {1.0});
    CHECK(focal_loss(prob, target, 2.0, 0.25).item() <= 1e-14);
  }
  SUBCASE("closed form at p_t = 0.9, gamma 2, alpha 0.25") {
    Tensor prob = Tensor::from_data({1, 1}, {0.9});
    Tensor target = Tensor::from_data({1, 1}, {1.0});
    const double expected = oracle::focal_term(0.9, 1.0, 2.0, 0.25);
    CHECK(expected == doctest::Approx(2.6341e-4).epsilon(1e-3));
    CHECK(focal_loss(prob, target, 2.0, 0.25).item() ==
          doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("targets outside {0,1} are a contract error") {
    Tensor prob = Tensor::from_data({1, 1}, {0.5});
    CHECK_THROWS_AS(focal_loss(prob, Tensor::from_data({1, 1}, {0.5}), 2.0, 0.25),
                    ContractError);
  }
  SUBCASE("monotone decreasing in p_t") {
    double last = 1e300;
    for (double p = 0.05; p < 1.0; p += 0.05) {
      Tensor prob = Tensor::from_data({1, 1}, {p});
      Tensor target = Tensor::from_data({1, 1}, {1.0});
      const double l = focal_loss(prob, target, 2.0, 0.25).item();
      CHECK(l < last);
      last = l;
    }
  }
  SUBCASE("matches the per-element closed form on a random batch") {
    Rng rng(82);
    std::vector<double> p(5 * 12), t(5 * 12);
    for (auto& v : p) v = rng.uniform(0.01, 0.99);
    for (auto& v : t) v = rng.next_unit() < 0.4 ? 1.0 : 0.0;
    double expected = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      expected += oracle::focal_term(p[i], t[i], 2.0, 0.25);
    }
    expected /= static_cast<double>(p.size());
    Tensor loss = focal_loss(Tensor::from_data({5, 12}, p), Tensor::from_data({5, 12}, t), 2.0,
                             0.25);
    CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("gradient passes the finite-difference oracle") {
    Rng rng(83);
    std::vector<double> p(3 * 12), t(3 * 12);
    for (auto& v : p) v = rng.uniform(0.05, 0.95);
    for (auto& v : t) v = rng.next_unit() < 0.4 ? 1.0 : 0.0;
    Tensor prob = Tensor::from_data({3, 12}, p);
    Tensor target = Tensor::from_data({3, 12}, t);
    auto fn = [&]() { return focal_loss(prob, target, 2.0, 0.25); };
    CHECK(grad_check(fn, prob, 1e-5) <= 1e-5);
  }
}

TEST_CASE("f1 scores") {
  SUBCASE("perfect prediction with every channel present") {
    std::vector<std::uint8_t> bits(4 * 12, 0);
    for (long i = 0; i < 4; ++i) {
      for (long c = 0; c < 12; ++c) bits[i * 12 + c] = (i + c) % 2;
    }
    for (long c = 0; c < 12; ++c) bits[c] = 1;  // ensure every channel has a positive
    CHECK(f1_macro(bits, bits, 12) == 1.0);
    CHECK(f1_micro(bits, bits, 12) == 1.0);
  }
  SUBCASE("all-zero predictions against all-one targets") {
    std::vector<std::uint8_t> pred(3 * 12, 0), target(3 * 12, 1);
    CHECK(f1_macro(pred, target, 12) == 0.0);
  }
  SUBCASE("random cases match the brute-force counting oracle exactly") {
    Rng rng(84);
    for (int trial = 0; trial < 25; ++trial) {
      std::vector<std::uint8_t> pred(50 * 12), target(50 * 12);
      for (auto& b : pred) b = rng.next_unit() < 0.35 ? 1 : 0;
      for (auto& b : target) b = rng.next_unit() < 0.35 ? 1 : 0;
      CHECK(f1_macro(pred, target, 12) == oracle::f1_macro_counted(pred, target, 12));
    }
  }
  SUBCASE("size contract") {
    CHECK_THROWS_AS(f1_macro({1, 0}, {1}, 12), ContractError);
    CHECK_THROWS_AS(f1_macro({1, 0, 1}, {1, 0, 1}, 12), ContractError);
  }
}
