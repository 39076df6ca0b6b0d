// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "affect/ensemble.hpp"
#include "affect/error.hpp"
#include "affect/metrics.hpp"
#include "affect/rng.hpp"

using namespace affect;

namespace {

std::vector<std::string> make_ids(long n) {
  std::vector<std::string> ids;
  for (long i = 0; i < n; ++i) ids.push_back("v" + std::to_string(i));
  return ids;
}

// K noisy copies of a shared target trajectory.
struct NoisyFolds {
  std::vector<std::array<double, 2>> target;
  std::vector<std::vector<std::array<double, 2>>> folds;
};

NoisyFolds make_noisy_folds(long frames, int k, double sigma, Rng& rng) {
  NoisyFolds out;
  out.target.resize(frames);
  for (long f = 0; f < frames; ++f) {
    const double t = static_cast<double>(f) / static_cast<double>(frames);
    out.target[f] = {0.8 * std::sin(6.28 * t * 1.3), 0.7 * std::cos(6.28 * t * 0.9)};
  }
  out.folds.resize(k);
  for (int fold = 0; fold < k; ++fold) {
    out.folds[fold].resize(frames);
    for (long f = 0; f < frames; ++f) {
      for (int c = 0; c < 2; ++c) {
        out.folds[fold][f][c] =
            std::clamp(out.target[f][c] + rng.normal(0.0, sigma), -1.0, 1.0);
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("kfold_split") {
  SUBCASE("5 videos into 5 folds: one each") {
    FoldAssignment a = kfold_split(make_ids(5), 5, 7);
    auto sizes = a.sizes();
    CHECK(sizes == std::vector<long>{1, 1, 1, 1, 1});
  }
  SUBCASE("same seed twice is identical") {
    FoldAssignment a = kfold_split(make_ids(12), 4, 99);
    FoldAssignment b = kfold_split(make_ids(12), 4, 99);
    CHECK(a.fold_of == b.fold_of);
    FoldAssignment c = kfold_split(make_ids(12), 4, 100);
    CHECK(a.fold_of != c.fold_of);
  }
  SUBCASE("23 videos into 5 folds: sizes {5,5,5,4,4} in some order") {
    FoldAssignment a = kfold_split(make_ids(23), 5, 7);
    auto sizes = a.sizes();
    std::sort(sizes.begin(), sizes.end());
    CHECK(sizes == std::vector<long>{4, 4, 5, 5, 5});
  }
  SUBCASE("contracts") {
    CHECK_THROWS_AS(kfold_split(make_ids(3), 5, 7), ContractError);
    CHECK_THROWS_AS(kfold_split(make_ids(5), 1, 7), ContractError);
    auto dup = make_ids(5);
    dup[4] = dup[0];
    CHECK_THROWS_AS(kfold_split(dup, 2, 7), ContractError);
  }
}

TEST_CASE("fold score vectors") {
  SUBCASE("K=5 gives width-10 frames") {
    std::vector<std::vector<std::array<double, 2>>> folds(
        5, std::vector<std::array<double, 2>>(3, {0.1, 0.2}));
    FoldScoreSequence f = build_fold_scores("vid", folds);
    CHECK(f.width() == 10);
    CHECK(static_cast<long>(f.values.size()) == 3 * 10);
  }
  SUBCASE("K=2 ordering: [V1, V2, A1, A2]") {
    std::vector<std::vector<std::array<double, 2>>> folds{{{0.1, 0.2}}, {{0.3, 0.4}}};
    FoldScoreSequence f = build_fold_scores("vid", folds);
    CHECK(f.values == std::vector<double>{0.1, 0.3, 0.2, 0.4});
  }
  SUBCASE("identical folds produce equal components") {
    std::vector<std::vector<std::array<double, 2>>> folds(
        3, std::vector<std::array<double, 2>>(2, {0.7, -0.5}));
    FoldScoreSequence f = build_fold_scores("vid", folds);
    for (long frame = 0; frame < 2; ++frame) {
      for (int k = 0; k < 3; ++k) {
        CHECK(f.values[frame * 6 + k] == 0.7);
        CHECK(f.values[frame * 6 + 3 + k] == -0.5);
      }
    }
  }
  SUBCASE("frame-count mismatch names the video and the fold") {
    std::vector<std::vector<std::array<double, 2>>> folds{
        std::vector<std::array<double, 2>>(4, {0.0, 0.0}),
        std::vector<std::array<double, 2>>(3, {0.0, 0.0})};
    CHECK_THROWS_WITH_AS(build_fold_scores("clip7", folds), doctest::Contains("clip7"),
                         ContractError);
    CHECK_THROWS_WITH_AS(build_fold_scores("clip7", folds), doctest::Contains("fold 1"),
                         ContractError);
  }
  SUBCASE("slicing recovers each fold bit-exactly") {
    Rng rng(42);
    std::vector<std::vector<std::array<double, 2>>> folds(4);
    for (auto& f : folds) {
      f.resize(9);
      for (auto& va : f) va = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    }
    FoldScoreSequence f = build_fold_scores("vid", folds);
    for (int k = 0; k < 4; ++k) {
      auto sliced = slice_fold(f, k);
      REQUIRE(sliced.size() == folds[k].size());
      for (std::size_t i = 0; i < sliced.size(); ++i) {
        CHECK(sliced[i][0] == folds[k][i][0]);
        CHECK(sliced[i][1] == folds[k][i][1]);
      }
    }
    CHECK_THROWS_AS(slice_fold(f, 4), ContractError);
  }
}

TEST_CASE("average_folds") {
  SUBCASE("identical folds average to themselves") {
    std::vector<std::vector<std::array<double, 2>>> folds(
        4, std::vector<std::array<double, 2>>(3, {0.25, -0.75}));
    auto avg = average_folds(build_fold_scores("vid", folds));
    for (const auto& va : avg) {
      CHECK(va[0] == 0.25);
      CHECK(va[1] == -0.75);
    }
  }
  SUBCASE("K=2 mean of 0.2 and 0.4 is 0.3") {
    std::vector<std::vector<std::array<double, 2>>> folds{{{0.2, 0.0}}, {{0.4, 0.0}}};
    auto avg = average_folds(build_fold_scores("vid", folds));
    CHECK(avg[0][0] == doctest::Approx(0.3).epsilon(1e-15));
  }
  SUBCASE("permutation of the fold axis leaves the average unchanged") {
    Rng rng(43);
    std::vector<std::vector<std::array<double, 2>>> folds(5);
    for (auto& f : folds) {
      f.resize(7);
      for (auto& va : f) va = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    }
    auto base = average_folds(build_fold_scores("vid", folds));
    std::vector<std::vector<std::array<double, 2>>> permuted{folds[3], folds[0], folds[4],
                                                             folds[1], folds[2]};
    auto perm = average_folds(build_fold_scores("vid", permuted));
    for (std::size_t i = 0; i < base.size(); ++i) {
      CHECK(perm[i][0] == doctest::Approx(base[i][0]).epsilon(1e-12));
      CHECK(perm[i][1] == doctest::Approx(base[i][1]).epsilon(1e-12));
    }
  }
  SUBCASE("averaging noisy folds beats every single fold (fixed seed)") {
    Rng rng(7);
    NoisyFolds nf = make_noisy_folds(1200, 5, 0.3, rng);
    FoldScoreSequence f = build_fold_scores("vid", nf.folds);
    std::vector<double> tv, ta;
    for (const auto& va : nf.target) {
      tv.push_back(va[0]);
      ta.push_back(va[1]);
    }
    auto pooled_ccc = [&](const std::vector<std::array<double, 2>>& pred) {
      std::vector<double> pv, pa;
      for (const auto& va : pred) {
        pv.push_back(va[0]);
        pa.push_back(va[1]);
      }
      return va_combined(ccc(pv, tv), ccc(pa, ta));
    };
    const double avg_score = pooled_ccc(average_folds(f));
    for (int k = 0; k < 5; ++k) {
      CHECK(avg_score > pooled_ccc(slice_fold(f, k)));
    }
  }
}

TEST_CASE("stage-2 model") {
  ModelSpec spec;
  spec.kind = "stage2";
  spec.fold_count = 5;
  spec.feat_dim = 10;
  spec.gru_layers = 4;
  spec.gru_hidden = 8;
  spec.attn_window = 2;
  Rng rng(44);
  Stage2Model model = Stage2Model::build(spec, rng);

  SUBCASE("output shape is [B,T,2] and stays in [-1,1]") {
    std::vector<double> x(2 * 6 * 10);
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    Tensor out = model.forward(Tensor::from_data({2, 6, 10}, std::move(x)));
    CHECK(out.shape() == Shape{2, 6, 2});
    for (double v : out.data()) CHECK(std::abs(v) <= 1.0);
  }
  SUBCASE("zero-initialized head predicts exactly zero") {
    for (auto& v : model.head.weight.mutable_data()) v = 0.0;
    for (auto& v : model.head.bias.mutable_data()) v = 0.0;
    std::vector<double> x(1 * 4 * 10, 0.3);
    Tensor out = model.forward(Tensor::from_data({1, 4, 10}, std::move(x)));
    for (double v : out.data()) CHECK(v == 0.0);
  }
  SUBCASE("feature width mismatch is a checkpoint error") {
    CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 4, 8})), CheckpointError);
  }
  SUBCASE("spec must agree with 2K") {
    ModelSpec bad = spec;
    bad.feat_dim = 8;
    Rng r2(1);
    CHECK_THROWS_AS(Stage2Model::build(bad, r2), ConfigError);
  }
}
