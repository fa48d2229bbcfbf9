#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "metaformer/ops.hpp"
#include "metaformer/tensor.hpp"
#include "testutil.hpp"

using namespace metaformer;

TEST_CASE("tensor construction and invariants") {
  Tensor t(Shape{2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, {1.0, 2.0, 3.0}), ShapeError);

  Tensor s = Tensor::scalar_value(4.5);
  CHECK(s.item() == doctest::Approx(4.5));
  CHECK_THROWS_AS(t.item(), ContractError);
}

TEST_CASE("backward on sum gives ones") {
  Tensor x(Shape{2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor loss = sum_all(x);
  loss.backward();
  for (auto g : x.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("backward of sum of squares") {
  Tensor x(Shape{2}, {1, 2}, true);
  Tensor loss = sum_all(mul(x, x));
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward twice without reset is an error") {
  Tensor x(Shape{3}, {1, 2, 3}, true);
  Tensor loss = sum_all(mul(x, x));
  loss.backward();
  CHECK_THROWS_AS(loss.backward(), ContractError);
}

TEST_CASE("backward requires a scalar loss") {
  Tensor x(Shape{3}, {1, 2, 3}, true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(y.backward(), ContractError);
}

TEST_CASE("every reachable requires_grad tensor ends up with a grad") {
  Tensor a(Shape{2}, {1, 2}, true);
  Tensor b(Shape{2}, {3, 4}, true);
  Tensor c = mul(a, b);
  Tensor loss = sum_all(add(c, a));
  loss.backward();
  CHECK(a.grad()[0] == doctest::Approx(4.0));  // b + 1
  CHECK(a.grad()[1] == doctest::Approx(5.0));
  CHECK(b.grad()[0] == doctest::Approx(1.0));
  CHECK(b.grad()[1] == doctest::Approx(2.0));
}

TEST_CASE("grad accumulates across reuses of one tensor") {
  Tensor x(Shape{2}, {2, 3}, true);
  Tensor loss = sum_all(add(mul(x, x), x));
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(5.0));  // 2x + 1
  CHECK(x.grad()[1] == doctest::Approx(7.0));
}

TEST_CASE("no_grad disables taping") {
  Tensor x(Shape{2}, {1, 2}, true);
  NoGradGuard ng;
  Tensor y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("detach cuts the tape") {
  Tensor x(Shape{2}, {1, 2}, true);
  Tensor y = mul(x, x).detach();
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("graph trace is acyclic and ordered") {
  Tensor x(Shape{2}, {1, 2}, true);
  Tensor y = mul(x, x);
  Tensor z = add(y, x);
  Tensor loss = sum_all(z);
  ComputationGraph g = ComputationGraph::trace(loss);
  CHECK(g.node_count() == 3);  // mul, add, reduce_sum
}

TEST_CASE("engine determinism: same seed, bit-identical values") {
  Rng r1(42), r2(42);
  Tensor a = Tensor::randn(Shape{4, 4}, r1);
  Tensor b = Tensor::randn(Shape{4, 4}, r2);
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    CHECK(a.data()[i] == b.data()[i]);
  }
  Tensor c1 = matmul(a, a);
  Tensor c2 = matmul(b, b);
  for (std::int64_t i = 0; i < c1.numel(); ++i) {
    CHECK(c1.data()[i] == c2.data()[i]);
  }
}
