#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "metaformer/ops.hpp"
#include "testutil.hpp"

using namespace metaformer;
using testutil::grad_rel_err;

TEST_CASE("matmul identity and hand arithmetic") {
  Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
  Tensor m(Shape{2, 2}, {5, 6, 7, 8});
  Tensor out = matmul(eye, m);
  for (std::int64_t i = 0; i < 4; ++i) CHECK(out.data()[i] == m.data()[i]);

  Tensor a(Shape{1, 2}, {1, 2});
  Tensor b(Shape{2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == doctest::Approx(11.0));
}

TEST_CASE("matmul shape error names both shapes") {
  Tensor a(Shape{2, 3});
  Tensor b(Shape{4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum equals ones*b^T and passes finite diff") {
  Rng rng(7);
  Tensor a = testutil::random_tensor({3, 4}, rng);
  Tensor b = testutil::random_tensor({4, 2}, rng, false);
  Tensor loss = sum_all(matmul(a, b));
  loss.backward();
  // d(sum)/dA = ones(3,2) * B^T
  for (std::int64_t i = 0; i < 3; ++i) {
    for (std::int64_t k = 0; k < 4; ++k) {
      double expect = 0;
      for (std::int64_t j = 0; j < 2; ++j) expect += b.data()[k * 2 + j];
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  double err = grad_rel_err([&] { return sum_all(matmul(a, b)); }, {a});
  CHECK(err < 1e-6);
}

TEST_CASE("matmul broadcast over batch dims") {
  Rng rng(3);
  Tensor a = testutil::random_tensor({2, 3, 4, 5}, rng);
  Tensor b = testutil::random_tensor({5, 6}, rng);
  Tensor out = matmul(a, b);
  CHECK(out.shape() == Shape{2, 3, 4, 6});
  double err = grad_rel_err(
      [&] { return sum_all(mul(matmul(a, b), matmul(a, b))); }, {a, b});
  CHECK(err < 1e-5);
}

TEST_CASE("softmax trivial rows") {
  Tensor x(Shape{3}, {0, 0, 0});
  Tensor y = softmax(x, 0);
  for (auto v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  Tensor one(Shape{1}, std::vector<scalar>{2.7});
  CHECK(softmax(one, 0).item() == doctest::Approx(1.0));
}

TEST_CASE("softmax against extended-precision oracle") {
  Tensor x(Shape{3}, {1, 2, 3});
  Tensor y = softmax(x, 0);
  // independent oracle at long double precision
  long double e1 = expl(1.0L), e2 = expl(2.0L), e3 = expl(3.0L);
  long double z = e1 + e2 + e3;
  CHECK(y.data()[0] == doctest::Approx(static_cast<double>(e1 / z)).epsilon(1e-12));
  CHECK(y.data()[1] == doctest::Approx(static_cast<double>(e2 / z)).epsilon(1e-12));
  CHECK(y.data()[2] == doctest::Approx(static_cast<double>(e3 / z)).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and lie in [0,1]") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = Tensor::randn(Shape{4, 7}, rng, 5.0);
    Tensor y = softmax(x, 1);
    for (std::int64_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::int64_t c = 0; c < 7; ++c) {
        double v = y.data()[r * 7 + c];
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("softmax NaN propagates") {
  Tensor x(Shape{2}, {std::numeric_limits<scalar>::quiet_NaN(), 1.0});
  Tensor y = softmax(x, 0);
  CHECK(std::isnan(y.data()[0]));
  CHECK(std::isnan(y.data()[1]));
}

TEST_CASE("softmax gradient") {
  Rng rng(13);
  Tensor x = testutil::random_tensor({3, 5}, rng);
  Tensor w = testutil::random_tensor({3, 5}, rng, false);
  double err =
      grad_rel_err([&] { return sum_all(mul(softmax(x, 1), w)); }, {x});
  CHECK(err < 1e-6);
}

TEST_CASE("layernorm basics") {
  Tensor g = Tensor::ones({4});
  Tensor b = Tensor::zeros({4});
  Tensor x = Tensor::full({2, 4}, 3.0);
  Tensor y = layernorm(x, g, b, 1e-5);
  for (auto v : y.data()) CHECK(v == doctest::Approx(0.0));

  Tensor x2(Shape{2}, {1, -1});
  Tensor g2 = Tensor::ones({2});
  Tensor b2 = Tensor::zeros({2});
  Tensor y2 = layernorm(x2, g2, b2, 1e-12);
  CHECK(y2.data()[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(y2.data()[1] == doctest::Approx(-1.0).epsilon(1e-6));

  CHECK_THROWS_AS(layernorm(x2, g2, b2, 0.0), ConfigError);
}

TEST_CASE("layernorm statistics on random input") {
  Rng rng(17);
  Tensor x = Tensor::randn(Shape{3, 16}, rng, 2.5);
  Tensor g = Tensor::ones({16});
  Tensor b = Tensor::zeros({16});
  const double eps = 1e-11;
  Tensor y = layernorm(x, g, b, eps);
  for (std::int64_t r = 0; r < 3; ++r) {
    double mean = 0, var = 0;
    for (std::int64_t c = 0; c < 16; ++c) mean += y.data()[r * 16 + c];
    mean /= 16;
    for (std::int64_t c = 0; c < 16; ++c) {
      double d = y.data()[r * 16 + c] - mean;
      var += d * d;
    }
    var /= 16;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(std::abs(var - 1.0) < 1e-9);
  }
}

TEST_CASE("layernorm gradient") {
  Rng rng(19);
  Tensor x = testutil::random_tensor({2, 6}, rng);
  Tensor g = testutil::random_tensor({6}, rng);
  Tensor b = testutil::random_tensor({6}, rng);
  Tensor w = testutil::random_tensor({2, 6}, rng, false);
  double err = grad_rel_err(
      [&] { return sum_all(mul(layernorm(x, g, b, 1e-5), w)); }, {x, g, b});
  CHECK(err < 1e-5);
}

TEST_CASE("conv2d 1x1 identity kernel") {
  Rng rng(23);
  Tensor x = Tensor::randn(Shape{1, 2, 3, 3}, rng);
  Tensor w(Shape{2, 2, 1, 1}, {1, 0, 0, 1});
  Tensor out = conv2d(x, w, Tensor(), 1, 0, 1);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(out.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d all-ones 3x3 on all-ones 5x5") {
  Tensor x = Tensor::ones({1, 1, 5, 5});
  Tensor w = Tensor::ones({1, 1, 3, 3});
  Tensor out = conv2d(x, w, Tensor(), 1, 1, 1);
  CHECK(out.shape() == Shape{1, 1, 5, 5});
  CHECK(out.data()[2 * 5 + 2] == doctest::Approx(9.0));  // center
  CHECK(out.data()[0] == doctest::Approx(4.0));          // corner
  CHECK(out.data()[4] == doctest::Approx(4.0));
  CHECK(out.data()[24] == doctest::Approx(4.0));
}

TEST_CASE("conv2d gradient vs finite differences") {
  Rng rng(29);
  Tensor x = testutil::random_tensor({2, 3, 8, 8}, rng);
  Tensor w = testutil::random_tensor({4, 3, 3, 3}, rng);
  Tensor b = testutil::random_tensor({4}, rng);
  Tensor mask = testutil::random_tensor({2, 4, 4, 4}, rng, false);
  double err = grad_rel_err(
      [&] { return sum_all(mul(conv2d(x, w, b, 2, 1, 1), mask)); }, {x, w, b},
      1e-5, 160, &rng);
  CHECK(err < 1e-5);
}

TEST_CASE("conv2d grouped and depthwise gradient") {
  Rng rng(31);
  Tensor x = testutil::random_tensor({1, 4, 5, 5}, rng);
  Tensor wg = testutil::random_tensor({4, 2, 3, 3}, rng);
  Tensor wd = testutil::random_tensor({4, 1, 3, 3}, rng);
  Tensor m1 = testutil::random_tensor({1, 4, 5, 5}, rng, false);
  double err1 = grad_rel_err(
      [&] { return sum_all(mul(conv2d(x, wg, Tensor(), 1, 1, 2), m1)); },
      {x, wg}, 1e-5, 120, &rng);
  CHECK(err1 < 1e-5);
  double err2 = grad_rel_err(
      [&] { return sum_all(mul(conv2d(x, wd, Tensor(), 1, 1, 4), m1)); },
      {x, wd}, 1e-5, 120, &rng);
  CHECK(err2 < 1e-5);
}

TEST_CASE("conv2d stride 2 halves even spatial dims with pad 1 kernel 3") {
  Tensor x = Tensor::ones({1, 1, 8, 12});
  Tensor w = Tensor::ones({1, 1, 3, 3});
  Tensor out = conv2d(x, w, Tensor(), 2, 1, 1);
  CHECK(out.shape() == Shape{1, 1, 4, 6});
}

TEST_CASE("conv2d errors") {
  Tensor x = Tensor::ones({1, 3, 2, 2});
  Tensor w = Tensor::ones({4, 3, 5, 5});
  CHECK_THROWS_AS(conv2d(x, w, Tensor(), 1, 0, 1), ShapeError);
  Tensor w2 = Tensor::ones({4, 2, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w2, Tensor(), 1, 1, 1), ShapeError);
}

TEST_CASE("elementwise basics") {
  Tensor z = Tensor::zeros({1});
  CHECK(sigmoid(z).item() == doctest::Approx(0.5));
  CHECK(silu(z).item() == doctest::Approx(0.0));

  Rng rng(37);
  Tensor x = testutil::random_tensor({5}, rng);
  double err = grad_rel_err([&] { return sum_all(gelu(x)); }, {x});
  CHECK(err < 1e-6);

  Tensor a = Tensor::ones({2, 3});
  Tensor bad = Tensor::ones({4});
  CHECK_THROWS_AS(add(a, bad), ShapeError);
}

TEST_CASE("broadcast add/mul with gradient reduction") {
  Rng rng(41);
  Tensor a = testutil::random_tensor({2, 3, 4}, rng);
  Tensor b = testutil::random_tensor({4}, rng);
  Tensor c = testutil::random_tensor({3, 1}, rng);
  double err = grad_rel_err(
      [&] { return sum_all(mul(add(a, b), add(a, c))); }, {a, b, c});
  CHECK(err < 1e-5);
}

TEST_CASE("maxpool 2x2") {
  Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = maxpool2x2(x);
  CHECK(y.item() == doctest::Approx(4.0));

  Rng rng(43);
  Tensor x2 = testutil::random_tensor({2, 3, 4, 4}, rng);
  Tensor m = testutil::random_tensor({2, 3, 2, 2}, rng, false);
  double err =
      grad_rel_err([&] { return sum_all(mul(maxpool2x2(x2), m)); }, {x2});
  CHECK(err < 1e-5);

  Tensor odd = Tensor::ones({1, 1, 3, 4});
  CHECK_THROWS_AS(maxpool2x2(odd), ShapeError);
}

TEST_CASE("maxpool gradient routes to the argmax only") {
  Tensor x(Shape{1, 1, 2, 2}, {1, 7, 3, 4}, true);
  Tensor loss = sum_all(maxpool2x2(x));
  loss.backward();
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 1.0);
  CHECK(x.grad()[2] == 0.0);
  CHECK(x.grad()[3] == 0.0);
}

TEST_CASE("linear matches matmul plus bias") {
  Rng rng(47);
  Tensor x = testutil::random_tensor({3, 4, 5}, rng);
  Tensor w = testutil::random_tensor({5, 6}, rng);
  Tensor b = testutil::random_tensor({6}, rng);
  Tensor y = linear(x, w, b);
  Tensor ref = add(matmul(x, w), b);
  for (std::int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
  double err = grad_rel_err(
      [&] { return sum_all(mul(linear(x, w, b), linear(x, w, b))); },
      {x, w, b}, 1e-5, 120, &rng);
  CHECK(err < 1e-5);
}

TEST_CASE("shape ops gradients") {
  Rng rng(53);
  Tensor x = testutil::random_tensor({2, 3, 4}, rng);
  Tensor m = testutil::random_tensor({4, 6}, rng, false);
  double err1 = grad_rel_err(
      [&] { return sum_all(mul(reshape(x, {4, 6}), m)); }, {x});
  CHECK(err1 < 1e-6);

  Tensor mp = testutil::random_tensor({4, 2, 3}, rng, false);
  double err2 = grad_rel_err(
      [&] { return sum_all(mul(permute(x, {2, 0, 1}), mp)); }, {x});
  CHECK(err2 < 1e-6);

  Tensor y = testutil::random_tensor({2, 2, 4}, rng);
  Tensor mc = testutil::random_tensor({2, 5, 4}, rng, false);
  double err3 = grad_rel_err(
      [&] { return sum_all(mul(concat({x, y}, 1), mc)); }, {x, y});
  CHECK(err3 < 1e-6);

  Tensor ms = testutil::random_tensor({2, 2, 4}, rng, false);
  double err4 = grad_rel_err(
      [&] { return sum_all(mul(slice(x, 1, 1, 2), ms)); }, {x});
  CHECK(err4 < 1e-6);

  Tensor small = testutil::random_tensor({1, 3, 1}, rng);
  Tensor mb = testutil::random_tensor({2, 3, 4}, rng, false);
  double err5 = grad_rel_err(
      [&] { return sum_all(mul(broadcast_to(small, {2, 3, 4}), mb)); }, {small});
  CHECK(err5 < 1e-6);
}

TEST_CASE("reductions") {
  Tensor x(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor s = reduce_sum(x, {1}, false);
  CHECK(s.shape() == Shape{2});
  CHECK(s.data()[0] == doctest::Approx(6.0));
  CHECK(s.data()[1] == doctest::Approx(15.0));
  Tensor m = reduce_mean(x, {0}, true);
  CHECK(m.shape() == Shape{1, 3});
  CHECK(m.data()[0] == doctest::Approx(2.5));

  Rng rng(59);
  Tensor r = testutil::random_tensor({2, 3, 4}, rng);
  Tensor mm = testutil::random_tensor({2, 4}, rng, false);
  double err = grad_rel_err(
      [&] { return sum_all(mul(reduce_mean(r, {1}, false), mm)); }, {r});
  CHECK(err < 1e-6);
}

TEST_CASE("gather_rows and gather_bias") {
  Tensor table(Shape{3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Tensor out = gather_rows(table, {2, 0, 2});
  CHECK(out.shape() == Shape{3, 2});
  CHECK(out.data()[0] == 5.0);
  CHECK(out.data()[5] == 6.0);
  sum_all(out).backward();
  CHECK(table.grad()[0] == 1.0);   // row 0 hit once
  CHECK(table.grad()[2] == 0.0);   // row 1 never
  CHECK(table.grad()[4] == 2.0);   // row 2 hit twice
  CHECK_THROWS_AS(gather_rows(table, {3}), ContractError);

  Tensor bias_table(Shape{2, 3}, {1, 2, 3, 10, 20, 30}, true);
  std::vector<std::int32_t> map = {0, 1, 1, 2};
  Tensor b = gather_bias(bias_table, map, 2);
  CHECK(b.shape() == Shape{2, 2, 2});
  CHECK(b.data()[0] == 1.0);
  CHECK(b.data()[3] == 3.0);
  CHECK(b.data()[4] == 10.0);
  sum_all(b).backward();
  CHECK(bias_table.grad()[1] == 2.0);
}

TEST_CASE("attention kernels match a composed reference") {
  Rng rng(61);
  const std::int64_t b = 2, h = 3, t = 5, hd = 4;
  Tensor q = testutil::random_tensor({b, h, t, hd}, rng);
  Tensor k = testutil::random_tensor({b, h, t, hd}, rng);
  Tensor v = testutil::random_tensor({b, h, t, hd}, rng);
  Tensor bias = testutil::random_tensor({h, t, t}, rng);
  const scalar scl = 0.5;

  Tensor logits = attention_scores(q, k, scl, bias);
  Tensor ref = add(scale(matmul(q, permute(k, {0, 1, 3, 2})), scl),
                   reshape(bias, {1, h, t, t}));
  for (std::int64_t i = 0; i < logits.numel(); ++i)
    CHECK(logits.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));

  Tensor p = softmax(logits, 3);
  Tensor out = attention_apply(p, v);
  Tensor out_ref = matmul(p, v);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    CHECK(out.data()[i] == doctest::Approx(out_ref.data()[i]).epsilon(1e-12));

  double err = grad_rel_err(
      [&] {
        Tensor l = attention_scores(q, k, scl, bias);
        return sum_all(mul(attention_apply(softmax(l, 3), v), v));
      },
      {q, k, v, bias}, 1e-5, 160, &rng);
  CHECK(err < 1e-5);
}

TEST_CASE("cross entropy") {
  Tensor uniform = Tensor::zeros({2, 8});
  Tensor l = cross_entropy(uniform, {3, 5}, 0.0);
  CHECK(l.item() == doctest::Approx(std::log(8.0)).epsilon(1e-12));

  Tensor confident = Tensor::zeros({1, 4});
  confident.mutable_data()[2] = 200.0;
  CHECK(cross_entropy(confident, {2}, 0.0).item() ==
        doctest::Approx(0.0).epsilon(1e-9));

  CHECK_THROWS_AS(cross_entropy(uniform, {3, 8}, 0.0), ContractError);

  Rng rng(67);
  Tensor logits = testutil::random_tensor({4, 6}, rng);
  double err = grad_rel_err(
      [&] { return cross_entropy(logits, {1, 0, 5, 3}, 0.1); }, {logits});
  CHECK(err < 1e-6);
}

TEST_CASE("gradient property holds over random instances") {
  Rng rng(71);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = testutil::random_tensor({2, 3}, rng);
    Tensor y = testutil::random_tensor({2, 3}, rng);
    const int pick = static_cast<int>(rng.uniform_int(6));
    auto f = [&]() -> Tensor {
      switch (pick) {
        case 0: return sum_all(mul(gelu(x), y));
        case 1: return sum_all(mul(silu(x), y));
        case 2: return sum_all(mul(sigmoid(x), y));
        case 3: return sum_all(mul(softmax(x, 1), y));
        case 4: return sum_all(mul(add(x, y), sub(x, y)));
        default: return sum_all(scale(mul(x, y), 1.7));
      }
    };
    worst = std::max(worst, grad_rel_err(f, {x, y}));
  }
  CHECK(worst < 1e-4);
}
