#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "metaformer/nn.hpp"
#include "testutil.hpp"

using namespace metaformer;
using testutil::grad_rel_err;

namespace {
ForwardContext eval_ctx() { return ForwardContext{}; }
}  // namespace

TEST_CASE("conv stem shapes") {
  Rng rng(1);
  ConvStem tiny_stem(3, 16, 2, rng);
  Tensor img = Tensor::randn({2, 3, 64, 64}, rng);
  Tensor out = tiny_stem.forward(img);
  CHECK(out.shape() == Shape{2, 16, 32, 32});

  ConvStem mf0_stem(3, 64, 3, rng);
  Tensor big = Tensor::randn({1, 3, 224, 224}, rng);
  CHECK(mf0_stem.forward(big).shape() == Shape{1, 64, 112, 112});

  Tensor odd = Tensor::randn({1, 3, 9, 9}, rng);
  CHECK_THROWS_AS(tiny_stem.forward(odd), ShapeError);
}

TEST_CASE("conv stem gradient") {
  Rng rng(2);
  ConvStem stem(3, 8, 2, rng);
  Tensor img = testutil::random_tensor({1, 3, 8, 8}, rng);
  ParamList params;
  stem.collect("stem", params);
  std::vector<Tensor> leaves{img};
  for (auto& p : params) leaves.push_back(p.tensor);
  Tensor mask = testutil::random_tensor({1, 8, 4, 4}, rng, false);
  double err = grad_rel_err(
      [&] { return sum_all(mul(stem.forward(img), mask)); }, leaves, 1e-5, 80,
      &rng);
  CHECK(err < 1e-4);
}

TEST_CASE("mbconv residual-only path when the branch is fully dropped") {
  Rng rng(3);
  MBConvSpec spec;
  spec.in_ch = spec.out_ch = 8;
  spec.stride = 1;
  spec.drop_path_rate = 1.0;  // branch always dropped
  MBConv block(spec, rng);
  Tensor x = Tensor::randn({2, 8, 6, 6}, rng);
  ForwardContext ctx;
  ctx.training = true;
  ctx.rng = &rng;
  Tensor out = block.forward(x, ctx);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(out.data()[i] == x.data()[i]);
}

TEST_CASE("residual rule: only stride-1 equal-channel blocks skip-connect") {
  Rng rng(4);
  auto zero_branch = [](MBConv& block) {
    for (auto& v : block.project.w.mutable_data()) v = 0;
  };
  // stride 2: a zeroed branch leaves nothing (no residual)
  MBConvSpec s2spec;
  s2spec.in_ch = s2spec.out_ch = 8;
  s2spec.stride = 2;
  MBConv stride2(s2spec, rng);
  zero_branch(stride2);
  Tensor x = Tensor::randn({1, 8, 6, 6}, rng);
  Tensor out = stride2.forward(x, ForwardContext{});
  CHECK(out.shape() == Shape{1, 8, 3, 3});
  for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 0.0);

  // stride 1, equal channels: the zeroed branch still passes x through
  MBConvSpec s1spec;
  s1spec.in_ch = s1spec.out_ch = 8;
  MBConv stride1(s1spec, rng);
  zero_branch(stride1);
  Tensor out1 = stride1.forward(x, ForwardContext{});
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(out1.data()[i] == x.data()[i]);

  // channel change: no residual even at stride 1
  MBConvSpec cspec;
  cspec.in_ch = 8;
  cspec.out_ch = 12;
  MBConv chans(cspec, rng);
  zero_branch(chans);
  Tensor outc = chans.forward(x, ForwardContext{});
  CHECK(outc.shape() == Shape{1, 12, 6, 6});
  for (std::int64_t i = 0; i < outc.numel(); ++i) CHECK(outc.data()[i] == 0.0);
}

TEST_CASE("zeroed squeeze-excite gates every channel by one half") {
  Rng rng(5);
  SqueezeExcite se(6, 2, rng);
  for (auto& v : se.fc1.w.mutable_data()) v = 0;
  for (auto& v : se.fc2.w.mutable_data()) v = 0;
  Tensor x = Tensor::randn({2, 6, 3, 3}, rng);
  Tensor out = se.forward(x);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(out.data()[i] == doctest::Approx(0.5 * x.data()[i]).epsilon(1e-12));
}

TEST_CASE("mbconv rejects a bad se ratio") {
  Rng rng(6);
  MBConvSpec spec;
  spec.in_ch = spec.out_ch = 8;
  spec.se_ratio = 0.0;
  CHECK_THROWS_AS(MBConv(spec, rng), ConfigError);
  spec.se_ratio = 1.5;
  CHECK_THROWS_AS(MBConv(spec, rng), ConfigError);
}

TEST_CASE("mbconv gradient on a tiny instance") {
  Rng rng(7);
  MBConvSpec spec;
  spec.in_ch = spec.out_ch = 4;
  MBConv block(spec, rng);
  Tensor x = testutil::random_tensor({1, 4, 4, 4}, rng);
  ParamList params;
  block.collect("b", params);
  std::vector<Tensor> leaves{x};
  for (auto& p : params) leaves.push_back(p.tensor);
  ForwardContext ctx = eval_ctx();
  Tensor mask = testutil::random_tensor({1, 4, 4, 4}, rng, false);
  double err = grad_rel_err(
      [&] { return sum_all(mul(block.forward(x, ctx), mask)); }, leaves, 1e-5,
      120, &rng);
  CHECK(err < 1e-4);
}

TEST_CASE("mlp block is the identity with zero weights") {
  Rng rng(8);
  MlpBlock mlp(6, rng);
  for (auto& v : mlp.fc1.w.mutable_data()) v = 0;
  for (auto& v : mlp.fc2.w.mutable_data()) v = 0;
  Tensor x = Tensor::randn({2, 5, 6}, rng);
  Tensor out = mlp.forward(x, eval_ctx());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(out.data()[i] == x.data()[i]);
}

TEST_CASE("mlp block preserves token shape and passes gradcheck") {
  Rng rng(9);
  MlpBlock mlp(6, rng);
  Tensor x = testutil::random_tensor({2, 7, 6}, rng);
  CHECK(mlp.forward(x, eval_ctx()).shape() == x.shape());

  ParamList params;
  mlp.collect("mlp", params);
  std::vector<Tensor> leaves{x};
  for (auto& p : params) leaves.push_back(p.tensor);
  Tensor mask = testutil::random_tensor({2, 7, 6}, rng, false);
  ForwardContext ctx = eval_ctx();
  double err = grad_rel_err(
      [&] { return sum_all(mul(mlp.forward(x, ctx), mask)); }, leaves, 1e-5,
      120, &rng);
  CHECK(err < 1e-4);
}

TEST_CASE("drop path: identity in eval, zero branch at rate one") {
  Rng rng(10);
  Tensor x = Tensor::randn({4, 3}, rng);
  ForwardContext ev = eval_ctx();
  Tensor same = drop_path(x, 0.9, ev);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(same.data()[i] == x.data()[i]);

  ForwardContext tr;
  tr.training = true;
  tr.rng = &rng;
  Tensor dropped = drop_path(x, 1.0, tr);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(dropped.data()[i] == 0.0);

  // expected-value rescaling: surviving rows are scaled by 1/(1-rate)
  Tensor ones = Tensor::ones({2000, 1});
  Tensor out = drop_path(ones, 0.25, tr);
  double mean = 0;
  for (auto v : out.data()) mean += v;
  mean /= out.numel();
  CHECK(mean == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("channel layernorm normalizes across channels per position") {
  Rng rng(11);
  ChannelLayerNorm norm(8);
  Tensor x = testutil::random_tensor({2, 8, 3, 3}, rng);
  Tensor y = norm.forward(x);
  // at one position, mean over channels ~ 0
  double mean = 0;
  for (std::int64_t c = 0; c < 8; ++c) mean += y.data()[c * 9];
  CHECK(std::abs(mean / 8) < 1e-9);

  Tensor mask = testutil::random_tensor({2, 8, 3, 3}, rng, false);
  double err = grad_rel_err(
      [&] { return sum_all(mul(norm.forward(x), mask)); },
      {x, norm.gamma, norm.beta}, 1e-5, 100, &rng);
  CHECK(err < 1e-4);
}
