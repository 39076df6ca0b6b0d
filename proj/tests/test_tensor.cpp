// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <functional>

#include "affect/error.hpp"
#include "affect/grad_check.hpp"
#include "affect/rng.hpp"
#include "affect/tensor.hpp"

using namespace affect;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(shape, std::move(v));
}

}  // namespace

TEST_CASE("matmul identity and zero") {
  Rng rng(11);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor y = matmul(eye, x);
  for (long i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);

  Tensor z = matmul(Tensor::zeros({2, 3}), random_tensor({3, 4}, rng));
  CHECK(z.shape() == Shape{2, 4});
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), DimensionError);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[4x5]"), DimensionError);
}

TEST_CASE("matmul gradient matches central differences") {
  Rng rng(42);
  Tensor a = random_tensor({4, 5}, rng);
  Tensor b = random_tensor({5, 6}, rng);
  auto fa = [&](const Tensor& t) { return matmul(t, b); };
  CHECK(grad_check_fn(fa, a, 1e-5) <= 1e-6);
  auto fb = [&](const Tensor& t) { return matmul(a, t); };
  CHECK(grad_check_fn(fb, b, 1e-5) <= 1e-6);
}

TEST_CASE("elementwise basics") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(tanh(Tensor::scalar(0.0)).item() == 0.0);

  SUBCASE("scalar broadcast works both ways") {
    Tensor v = Tensor::from_data({3}, {1, 2, 3});
    Tensor s = Tensor::scalar(10.0);
    CHECK(add(v, s).data() == std::vector<double>{11, 12, 13});
    CHECK(sub(s, v).data() == std::vector<double>{9, 8, 7});
  }
  SUBCASE("incompatible shapes rejected") {
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
  }
  SUBCASE("saturated sigmoid stays finite") {
    Tensor big = Tensor::from_data({2}, {1000.0, -1000.0});
    Tensor s = sigmoid(big);
    CHECK(s.data()[0] == 1.0);
    CHECK(s.data()[1] == 0.0);
  }
}

TEST_CASE("concat along the last axis") {
  Rng rng(5);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({2, 3, 6}, rng);
  Tensor c = concat_last({a, b});
  CHECK(c.shape() == Shape{2, 3, 10});
  CHECK(c.at({1, 2, 3}) == a.at({1, 2, 3}));
  CHECK(c.at({1, 2, 4}) == b.at({1, 2, 0}));
  CHECK_THROWS_AS(concat_last({a, random_tensor({2, 2, 4}, rng)}), DimensionError);
}

TEST_CASE("softmax rows") {
  SUBCASE("uniform input gives uniform output") {
    Tensor x = Tensor::full({1, 5}, 3.7);
    Tensor y = softmax_last(x);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-14));
  }
  SUBCASE("extreme logits do not produce NaN") {
    Tensor y = softmax_last(Tensor::from_data({2}, {1000.0, 0.0}));
    CHECK(y.data()[0] == doctest::Approx(1.0));
    CHECK(y.data()[1] == doctest::Approx(0.0));
    for (double v : y.data()) CHECK(std::isfinite(v));
  }
  SUBCASE("random rows sum to one") {
    Rng rng(9);
    Tensor y = softmax_last(random_tensor({3, 7}, rng, -4.0, 4.0));
    for (long r = 0; r < 3; ++r) {
      double s = 0.0;
      for (long j = 0; j < 7; ++j) s += y.at({r, j});
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  SUBCASE("masked softmax zeroes masked positions exactly") {
    Tensor x = Tensor::from_data({1, 4}, {5.0, 1.0, -2.0, 3.0});
    Tensor m = Tensor::from_data({1, 4}, {1.0, 0.0, 1.0, 0.0});
    Tensor y = softmax_last_masked(x, m);
    CHECK(y.at({0, 1}) == 0.0);
    CHECK(y.at({0, 3}) == 0.0);
    CHECK(y.at({0, 0}) + y.at({0, 2}) == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("backward basics") {
  Rng rng(17);
  SUBCASE("sum gives ones") {
    Tensor x = random_tensor({4, 3}, rng);
    x.set_requires_grad(true);
    Tape tape;
    tape.backward(sum_all(x));
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("sum of squares gives 2x") {
    Tensor x = random_tensor({6}, rng);
    x.set_requires_grad(true);
    Tape tape;
    tape.backward(sum_all(mul(x, x)));
    for (long i = 0; i < 6; ++i) {
      CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i]).epsilon(1e-15));
    }
  }
  SUBCASE("non-scalar loss is a contract error") {
    Tensor x = random_tensor({3}, rng);
    x.set_requires_grad(true);
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }
  SUBCASE("fan-out gradients add") {
    Tensor x = random_tensor({5}, rng);
    x.set_requires_grad(true);
    Tape tape;
    // x feeds two branches; grads must sum: d/dx [sum(x) + sum(x.x)] = 1 + 2x
    tape.backward(add(sum_all(x), sum_all(mul(x, x))));
    for (long i = 0; i < 5; ++i) {
      CHECK(x.grad()[i] == doctest::Approx(1.0 + 2.0 * x.data()[i]).epsilon(1e-15));
    }
  }
}

TEST_CASE("ops leave input buffers untouched") {
  Rng rng(23);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor w = random_tensor({4, 2}, rng);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  const std::vector<double> x_before = x.data();
  const std::vector<double> w_before = w.data();
  {
    Tape tape;
    Tensor loss = sum_all(sigmoid(matmul(x, w)));
    tape.backward(loss);
  }
  CHECK(x.data() == x_before);
  CHECK(w.data() == w_before);
}

TEST_CASE("grad_check basics") {
  Rng rng(31);
  SUBCASE("identity has (near) zero error") {
    Tensor x = random_tensor({4}, rng);
    auto f = [](const Tensor& t) { return t; };
    CHECK(grad_check_fn(f, x, 1e-5) <= 1e-10);
  }
  SUBCASE("sigmoid within 1e-7") {
    Tensor x = random_tensor({6}, rng, -2.0, 2.0);
    auto f = [](const Tensor& t) { return sigmoid(t); };
    CHECK(grad_check_fn(f, x, 1e-5) <= 1e-7);
  }
  SUBCASE("eps outside (0, 1e-2] rejected") {
    Tensor x = random_tensor({2}, rng);
    auto f = [&x]() { return sum_all(x); };
    CHECK_THROWS_AS(grad_check(f, x, 0.5), ContractError);
    CHECK_THROWS_AS(grad_check(f, x, 0.0), ContractError);
  }
}

TEST_CASE("every op passes a finite-difference check on random small shapes") {
  Rng rng(7);
  auto check = [&rng](const char* name, const std::function<Tensor(const Tensor&)>& f, Tensor x,
                      double tol) {
    INFO(name);
    CHECK(grad_check_fn(f, x, 1e-5) <= tol);
  };

  Tensor other = random_tensor({3, 5}, rng);
  check("add", [&](const Tensor& t) { return add(t, other); }, random_tensor({3, 5}, rng), 1e-6);
  check("sub", [&](const Tensor& t) { return sub(other, t); }, random_tensor({3, 5}, rng), 1e-6);
  check("mul", [&](const Tensor& t) { return mul(t, other); }, random_tensor({3, 5}, rng), 1e-6);
  check("divide", [&](const Tensor& t) { return divide(other, t); },
        random_tensor({3, 5}, rng, 0.5, 2.0), 1e-6);
  check("divide_scalar", [&](const Tensor& t) { return divide(t, Tensor::scalar(0.7)); },
        random_tensor({3, 5}, rng), 1e-6);
  check("scale", [](const Tensor& t) { return scale(t, -2.5); }, random_tensor({4}, rng), 1e-6);
  check("add_const", [](const Tensor& t) { return add_const(t, 1.5); }, random_tensor({4}, rng),
        1e-6);
  Tensor bias = random_tensor({5}, rng);
  check("add_bias_x", [&](const Tensor& t) { return add_bias(t, bias); },
        random_tensor({3, 5}, rng), 1e-6);
  Tensor xb = random_tensor({3, 5}, rng);
  check("add_bias_b", [&](const Tensor& t) { return add_bias(xb, t); }, random_tensor({5}, rng),
        1e-6);
  check("sigmoid", [](const Tensor& t) { return sigmoid(t); }, random_tensor({2, 4}, rng), 1e-6);
  check("tanh", [](const Tensor& t) { return tanh(t); }, random_tensor({2, 4}, rng), 1e-6);
  // relu checked away from its kink at 0
  check("relu_pos", [](const Tensor& t) { return relu(t); }, random_tensor({8}, rng, 0.5, 2.0),
        1e-6);
  check("relu_neg", [](const Tensor& t) { return relu(t); }, random_tensor({8}, rng, -2.0, -0.5),
        1e-6);
  check("log", [](const Tensor& t) { return log(t); }, random_tensor({6}, rng, 0.2, 3.0), 1e-6);
  check("pow", [](const Tensor& t) { return pow(t, 2.5); }, random_tensor({6}, rng, 0.2, 2.0),
        1e-6);
  check("clamp_interior", [](const Tensor& t) { return clamp(t, -10.0, 10.0); },
        random_tensor({6}, rng), 1e-6);
  Tensor cpart = random_tensor({2, 3, 2}, rng);
  check("concat_last", [&](const Tensor& t) { return concat_last({t, cpart}); },
        random_tensor({2, 3, 4}, rng), 1e-6);
  check("slice_last", [](const Tensor& t) { return slice_last(t, 1, 3); },
        random_tensor({2, 6}, rng), 1e-6);
  check("select_time", [](const Tensor& t) { return select_time(t, 2); },
        random_tensor({2, 5, 3}, rng), 1e-6);
  check("select_axis0", [](const Tensor& t) { return select_axis0(t, 1); },
        random_tensor({3, 2, 2}, rng), 1e-6);
  check("select_frames",
        [](const Tensor& t) {
          return select_frames(t, {{0, 0}, {0, 2}, {1, 1}});
        },
        random_tensor({2, 4, 3}, rng), 1e-6);
  check("softmax_last", [](const Tensor& t) { return softmax_last(t); },
        random_tensor({3, 6}, rng, -2.0, 2.0), 1e-6);
  Tensor mask = Tensor::from_data({2, 4}, {1, 1, 0, 1, 0, 1, 1, 0});
  check("softmax_masked", [&](const Tensor& t) { return softmax_last_masked(t, mask); },
        random_tensor({2, 4}, rng, -2.0, 2.0), 1e-6);
  check("sum_all", [](const Tensor& t) { return sum_all(t); }, random_tensor({3, 3}, rng), 1e-6);
  check("mean_all", [](const Tensor& t) { return mean_all(t); }, random_tensor({3, 3}, rng), 1e-6);
  check("reshape", [](const Tensor& t) { return reshape(t, {6, 2}); }, random_tensor({3, 4}, rng),
        1e-6);

  // compositions
  Tensor gain = random_tensor({6}, rng, 0.5, 1.5);
  Tensor lbias = random_tensor({6}, rng);
  check("layer_norm_x", [&](const Tensor& t) { return layer_norm(t, gain, lbias); },
        random_tensor({4, 6}, rng), 1e-4);
  Tensor lx = random_tensor({4, 6}, rng);
  check("layer_norm_gain", [&](const Tensor& t) { return layer_norm(lx, t, lbias); },
        random_tensor({6}, rng, 0.5, 1.5), 1e-4);
  check("layer_norm_bias", [&](const Tensor& t) { return layer_norm(lx, gain, t); },
        random_tensor({6}, rng), 1e-4);
  Tensor b3 = random_tensor({2, 4, 3}, rng);
  check("bmm", [&](const Tensor& t) { return bmm(t, b3); }, random_tensor({2, 3, 4}, rng), 1e-6);
  check("bmm_tb", [&](const Tensor& t) { return bmm(t, b3.clone(), true); },
        random_tensor({2, 5, 3}, rng), 1e-6);
  Tensor parts0 = random_tensor({2, 3}, rng);
  check("stack_time", [&](const Tensor& t) { return stack_time({parts0, t, parts0}); },
        random_tensor({2, 3}, rng), 1e-6);
  check("stack_axis0", [&](const Tensor& t) { return stack_axis0({parts0, t}); },
        random_tensor({2, 3}, rng), 1e-6);
}

TEST_CASE("forward NaN surfaces as NumericError with an op id") {
  Tensor x = Tensor::from_data({2}, {-1.0, 2.0});
  CHECK_THROWS_WITH_AS(log(x), doctest::Contains("op #"), NumericError);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0}), DimensionError);
  Tensor s = Tensor::scalar(4.5);
  CHECK(s.item() == 4.5);
  CHECK_THROWS_AS(Tensor::zeros({3}).item(), ContractError);
}
