#include <cmath>
#include <random>

#include "doctest.h"
#include "r2t/errors.hpp"
#include "r2t/grad_check.hpp"
#include "r2t/ops.hpp"
#include "r2t/grad_suite.hpp"

using namespace r2t;

namespace {

Tensor randn(Shape shape, std::uint64_t seed, bool rg = true) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v), rg);
}

}  // namespace

TEST_CASE("matmul with identity returns the other operand") {
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor a = randn({3, 3}, 1, false);
  Tensor out = ops::matmul(eye, a);
  for (std::size_t i = 0; i < 9; ++i) CHECK(out.data()[i] == a.data()[i]);
}

TEST_CASE("softmax of a constant row is uniform") {
  Tensor y = ops::softmax(Tensor({4}, {0, 0, 0, 0}));
  for (double v : y.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("gelu(0) is 0") { CHECK(ops::gelu(Tensor({1}, {0.0})).item() == 0.0); }

TEST_CASE("label-smoothed cross entropy values") {
  const std::size_t t0[] = {0};
  SUBCASE("perfect prediction with eps 0") {
    CHECK(ops::cross_entropy_label_smoothed(Tensor({3}, {60, -60, -60}), t0, 0.0).item() < 1e-20);
  }
  SUBCASE("uniform logits give ln V") {
    for (std::size_t v : {2u, 5u, 17u}) {
      const std::size_t t[] = {v - 1};
      CHECK(ops::cross_entropy_label_smoothed(Tensor::zeros({v}), t, 0.0).item() ==
            doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-14));
    }
  }
  SUBCASE("eps 0.1, V=2, p=(0.7, 0.3)") {
    Tensor logits({2}, {std::log(0.7), std::log(0.3)});
    const double expected = -0.95 * std::log(0.7) - 0.05 * std::log(0.3);
    const double got = ops::cross_entropy_label_smoothed(logits, t0, 0.1).item();
    CHECK(got == doctest::Approx(expected).epsilon(1e-14));
    CHECK(got == doctest::Approx(0.39904).epsilon(1e-5));
  }
  SUBCASE("target out of range") {
    const std::size_t bad[] = {3};
    CHECK_THROWS_AS(ops::cross_entropy_label_smoothed(Tensor::zeros({3}), bad, 0.1), IndexError);
  }
}

TEST_CASE("backward of sum of squares is 2x") {
  Tensor x = randn({5}, 3);
  Tape tape;
  {
    TapeScope scope(tape);
    backward(ops::sum(ops::mul(x, x)));
  }
  for (std::size_t i = 0; i < 5; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i]).epsilon(1e-15));
  CHECK(tape.size() == 0);
}

TEST_CASE("cross entropy gradient is p - onehot") {
  Tensor z = randn({6}, 4);
  const std::size_t t[] = {2};
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(ops::cross_entropy_label_smoothed(z, t, 0.0));
  }
  Tensor p = ops::softmax(z.detach());
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(z.grad()[i] == doctest::Approx(p.data()[i] - (i == 2 ? 1.0 : 0.0)).epsilon(1e-14));
  }
}

TEST_CASE("backward on non-scalar is a contract violation") {
  Tensor x = randn({3}, 5);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = ops::scale(x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ContractViolation);
}

TEST_CASE("tape replays each primitive once in reverse order") {
  Tensor x = randn({2}, 6);
  std::vector<int> order;
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor a = ops::scale(x, 1.0);
    record_op(a, {&x}, [&order] { order.push_back(1); });
    Tensor b = ops::sum(a);
    record_op(b, {&a}, [&order] { order.push_back(2); });
    tape.backward(b);
  }
  CHECK(order == std::vector<int>{2, 1});
}

TEST_CASE("random three-layer composition matches finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor x = randn({3, 4}, 10 + seed);
    Tensor w1 = randn({4, 5}, 20 + seed), w2 = randn({5, 3}, 30 + seed);
    Tensor g = Tensor::full({5}, 1.0, true), b = Tensor::zeros({5}, true);
    auto f = [&] {
      Tensor h = ops::gelu(ops::layer_norm(ops::matmul(x, w1), g, b));
      Tensor s = ops::softmax(ops::matmul(h, w2));
      return ops::sum(ops::mul(s, ops::sigmoid(ops::matmul(h, w2))));
    };
    CHECK(grad_check_params(f, {x, w1, w2, g, b}) < 1e-4);
  }
}

TEST_CASE("grad_check: linear function is exact, layer norm passes, wrong adjoint is caught") {
  Tensor a = randn({6}, 7, false);
  CHECK(grad_check([&](const Tensor& x) { return ops::sum(ops::mul(x, a)); }, randn({6}, 8)) < 1e-9);

  Tensor g = Tensor::full({6}, 1.0), b = Tensor::zeros({6});
  CHECK(grad_check([&](const Tensor& x) { return ops::sum(ops::mul(ops::layer_norm(x, g, b), a)); },
                   randn({2, 6}, 9)) < 1e-4);

  // cube with a deliberately wrong adjoint (2x instead of 3x^2)
  auto broken_cube = [](const Tensor& x) {
    std::vector<double> v(x.values());
    for (auto& e : v) e = e * e * e;
    Tensor out(x.shape(), v);
    auto xi = x.impl_ptr(), oi = out.impl_ptr();
    record_op(out, {&x}, [xi, oi] {
      xi->ensure_grad();
      for (std::size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[i] * 2.0 * (*xi->data)[i];
    });
    return ops::sum(out);
  };
  CHECK(grad_check(broken_cube, Tensor({3}, {1.0, 2.0, -1.5}, true)) > 1e-2);
}

TEST_CASE("grad_check rejects non-finite probes") {
  auto blowup = [](const Tensor& x) { return ops::sum(ops::scale(x, 1e308)); };
  CHECK_THROWS_AS(grad_check(blowup, Tensor({1}, {10.0}, true)), NumericDomainError);
}

TEST_CASE("every primitive passes the gradient check on 20 random shapes") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& r : primitive_grad_suite(seed)) {
      INFO(r.kind << " seed " << seed);
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("softmax rows sum to one with entries in (0,1)") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = randn({3, 7}, 100 + trial, false);
    for (auto& v : x.mutable_data()) v *= 8.0;
    Tensor y = ops::softmax(x);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        const double p = y.data()[r * 7 + j];
        CHECK(p > 0.0);
        CHECK(p < 1.0);
        s += p;
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("reshape and transpose round trips restore the tensor exactly") {
  Tensor x = randn({2, 3, 4}, 12, false);
  Tensor back = ops::reshape(ops::reshape(x, {4, 6}), {2, 3, 4});
  CHECK(back.values() == x.values());
  Tensor tt = ops::transpose(ops::transpose(x, 0, 2), 0, 2);
  CHECK(tt.shape() == x.shape());
  CHECK(tt.values() == x.values());
  Tensor pp = ops::permute(ops::permute(x, {1, 2, 0}), {2, 0, 1});
  CHECK(pp.values() == x.values());
}

TEST_CASE("shape mismatches and non-finite inputs are rejected") {
  CHECK_THROWS_AS(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ContractViolation);
  CHECK_THROWS_AS(ops::add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ContractViolation);
  CHECK_THROWS_AS(ops::avg_pool2(Tensor::zeros({3, 2, 1})), ContractViolation);
  CHECK_THROWS_AS(ops::gelu(Tensor({1}, {std::nan("")})), NumericDomainError);
  CHECK_THROWS_AS(ops::scale(Tensor({1}, {1e300}), 1e300), NumericDomainError);
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 1}));
    FAIL("expected throw");
  } catch (const ContractViolation& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    CHECK(std::string(e.what()).find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("forward and backward are bit-identical across runs") {
  auto run = [] {
    Tensor x = randn({4, 5}, 13), w = randn({5, 5}, 14);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = ops::sum(ops::gelu(ops::matmul(x, w)));
    tape.backward(y);
    std::vector<double> out(w.grad().begin(), w.grad().end());
    out.push_back(y.item());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("no recording happens without an active tape") {
  Tensor x = randn({3}, 15);
  Tensor y = ops::scale(x, 2.0);
  CHECK_FALSE(y.requires_grad());
}
