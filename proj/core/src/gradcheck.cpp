#include "metaformer/gradcheck.hpp"

#include <cmath>

#include "metaformer/attention.hpp"
#include "metaformer/model.hpp"
#include "metaformer/ops.hpp"

namespace metaformer {

double finite_difference_check(const std::function<Tensor()>& loss_fn,
                               std::vector<Tensor> leaves, double h,
                               std::int64_t max_coords_per_leaf, Rng* rng) {
  for (auto& leaf : leaves) leaf.zero_grad();
  Tensor loss = loss_fn();
  loss.backward();
  std::vector<std::vector<scalar>> analytic;
  for (auto& leaf : leaves) {
    analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
  }
  double worst = 0;
  NoGradGuard ng;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const std::int64_t n = leaf.numel();
    std::vector<std::int64_t> coords;
    if (max_coords_per_leaf > 0 && max_coords_per_leaf < n) {
      for (std::int64_t i = 0; i < max_coords_per_leaf; ++i) {
        coords.push_back(static_cast<std::int64_t>(
            rng ? rng->uniform_int(static_cast<std::uint64_t>(n))
                : (i * 1009) % n));
      }
    } else {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    }
    for (auto ci : coords) {
      auto data = leaf.mutable_data();
      const scalar orig = data[ci];
      data[ci] = orig + static_cast<scalar>(h);
      const double fp = static_cast<double>(loss_fn().item());
      data[ci] = orig - static_cast<scalar>(h);
      const double fm = static_cast<double>(loss_fn().item());
      data[ci] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = static_cast<double>(analytic[li][ci]);
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

namespace {

Tensor rnd(Shape shape, Rng& rng) {
  return Tensor::randn(std::move(shape), rng, 1.0, true);
}

std::vector<GradCheckResult> gradcheck_ops(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckResult> results;
  auto run = [&](const char* name, const std::function<Tensor()>& fn,
                 std::vector<Tensor> leaves, std::int64_t coords = -1) {
    results.push_back({name, finite_difference_check(fn, std::move(leaves),
                                                     1e-5, coords, &rng)});
  };
  {
    Tensor a = rnd({3, 4}, rng), b = rnd({4, 2}, rng);
    run("matmul", [&] { return sum_all(mul(matmul(a, b), matmul(a, b))); },
        {a, b});
  }
  {
    Tensor x = rnd({3, 5}, rng), w = rnd({3, 5}, rng);
    run("softmax", [&] { return sum_all(mul(softmax(x, 1), w)); }, {x});
  }
  {
    Tensor x = rnd({2, 6}, rng), g = rnd({6}, rng), b = rnd({6}, rng);
    Tensor w = rnd({2, 6}, rng);
    run("layernorm",
        [&] { return sum_all(mul(layernorm(x, g, b, scalar(1e-5)), w)); },
        {x, g, b});
  }
  {
    Tensor x = rnd({1, 3, 6, 6}, rng), w = rnd({4, 3, 3, 3}, rng),
           b = rnd({4}, rng);
    Tensor m = rnd({1, 4, 3, 3}, rng);
    run("conv2d",
        [&] { return sum_all(mul(conv2d(x, w, b, 2, 1, 1), m)); }, {x, w, b},
        120);
  }
  {
    Tensor x = rnd({1, 4, 4, 4}, rng), w = rnd({4, 1, 3, 3}, rng);
    Tensor m = rnd({1, 4, 4, 4}, rng);
    run("conv2d_depthwise",
        [&] { return sum_all(mul(conv2d(x, w, Tensor(), 1, 1, 4), m)); },
        {x, w}, 120);
  }
  {
    Tensor x = rnd({2, 5}, rng), y = rnd({2, 5}, rng);
    run("gelu", [&] { return sum_all(mul(gelu(x), y)); }, {x});
    run("silu", [&] { return sum_all(mul(silu(x), y)); }, {x});
    run("sigmoid", [&] { return sum_all(mul(sigmoid(x), y)); }, {x});
    run("add_mul_scale",
        [&] { return sum_all(scale(mul(add(x, y), sub(x, y)), scalar(1.3))); },
        {x, y});
  }
  {
    Tensor x = rnd({1, 2, 4, 4}, rng);
    Tensor m = rnd({1, 2, 2, 2}, rng);
    run("maxpool2x2", [&] { return sum_all(mul(maxpool2x2(x), m)); }, {x});
  }
  {
    Tensor x = rnd({2, 3, 4}, rng), w = rnd({4, 5}, rng), b = rnd({5}, rng);
    Tensor m = rnd({2, 3, 5}, rng);
    run("linear", [&] { return sum_all(mul(linear(x, w, b), m)); }, {x, w, b});
  }
  {
    const std::int64_t bt = 1, hh = 2, tt = 4, hd = 3;
    Tensor q = rnd({bt, hh, tt, hd}, rng), k = rnd({bt, hh, tt, hd}, rng),
           v = rnd({bt, hh, tt, hd}, rng), bias = rnd({hh, tt, tt}, rng);
    run("attention",
        [&] {
          Tensor l = attention_scores(q, k, scalar(0.5), bias);
          return sum_all(mul(attention_apply(softmax(l, 3), v), v));
        },
        {q, k, v, bias}, 120);
  }
  {
    Tensor logits = rnd({4, 6}, rng);
    run("cross_entropy",
        [&] { return cross_entropy(logits, {1, 0, 5, 3}, scalar(0.1)); },
        {logits});
  }
  return results;
}

std::vector<GradCheckResult> gradcheck_blocks(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckResult> results;
  auto leaves_of = [](auto& module, Tensor extra) {
    ParamList params;
    module.collect("m", params);
    std::vector<Tensor> leaves{std::move(extra)};
    for (auto& p : params) leaves.push_back(p.tensor);
    return leaves;
  };
  ForwardContext ctx;
  {
    ConvStem stem(3, 8, 2, rng);
    Tensor x = rnd({1, 3, 8, 8}, rng);
    Tensor m = rnd({1, 8, 4, 4}, rng);
    results.push_back(
        {"conv_stem",
         finite_difference_check(
             [&] { return sum_all(mul(stem.forward(x), m)); },
             leaves_of(stem, x), 1e-5, 60, &rng)});
  }
  {
    MBConvSpec spec;
    spec.in_ch = spec.out_ch = 4;
    MBConv block(spec, rng);
    Tensor x = rnd({1, 4, 4, 4}, rng);
    Tensor m = rnd({1, 4, 4, 4}, rng);
    results.push_back(
        {"mbconv",
         finite_difference_check(
             [&] { return sum_all(mul(block.forward(x, ctx), m)); },
             leaves_of(block, x), 1e-5, 80, &rng)});
  }
  {
    MlpBlock mlp(6, rng);
    Tensor x = rnd({1, 5, 6}, rng);
    Tensor m = rnd({1, 5, 6}, rng);
    results.push_back(
        {"mlp_block",
         finite_difference_check(
             [&] { return sum_all(mul(mlp.forward(x, ctx), m)); },
             leaves_of(mlp, x), 1e-5, 80, &rng)});
  }
  {
    TransformerBlock block(8, 4, 0.0, rng);
    RelativeBiasTable bias(2, 2, 1, rng);
    Tensor x = rnd({1, 5, 8}, rng);
    Tensor m = rnd({1, 5, 8}, rng);
    ParamList params;
    block.collect("b", params);
    bias.collect("bias", params);
    std::vector<Tensor> leaves{x};
    for (auto& p : params) leaves.push_back(p.tensor);
    results.push_back(
        {"transformer_block",
         finite_difference_check(
             [&] { return sum_all(mul(block.forward(x, bias, ctx), m)); },
             leaves, 1e-5, 100, &rng)});
  }
  {
    OverlapPatchEmbed embed(3, 6, rng);
    Tensor x = rnd({1, 3, 6, 6}, rng);
    Tensor m = rnd({1, 9, 6}, rng);
    results.push_back(
        {"overlap_patch_embed",
         finite_difference_check(
             [&] { return sum_all(mul(embed.forward(x), m)); },
             leaves_of(embed, x), 1e-5, 80, &rng)});
  }
  {
    AggregateLayer agg(4, 6, rng);
    Tensor z1 = rnd({2, 4}, rng), z2 = rnd({2, 6}, rng);
    Tensor m = rnd({2, 6}, rng);
    ParamList params;
    agg.collect("agg", params);
    std::vector<Tensor> leaves{z1, z2};
    for (auto& p : params) leaves.push_back(p.tensor);
    results.push_back(
        {"aggregate_layer",
         finite_difference_check(
             [&] { return sum_all(mul(agg.forward(z1, z2), m)); }, leaves,
             1e-5, 80, &rng)});
  }
  {
    MetaSchema schema;
    schema.channels.push_back({MetaChannelKind::geo});
    schema.channels.push_back({MetaChannelKind::datetime});
    MetaEncoder enc(schema, 6, rng);
    MetaRecord rec;
    rec.geo = GeoPoint{12, -40};
    rec.datetime = DateTimeInfo{4, 16};
    std::vector<MetaRecord> recs{rec, MetaRecord{}};
    Tensor m = rnd({2, 2, 6}, rng);
    ParamList params;
    enc.collect("meta", params);
    std::vector<Tensor> leaves;
    for (auto& p : params) leaves.push_back(p.tensor);
    results.push_back(
        {"meta_encoder",
         finite_difference_check(
             [&] { return sum_all(mul(enc.encode(recs, ctx), m)); }, leaves,
             1e-5, 80, &rng)});
  }
  return results;
}

std::vector<GradCheckResult> gradcheck_model(std::uint64_t seed) {
  Rng rng(seed);
  ModelConfig cfg = ModelConfig::preset("tiny");
  cfg.num_classes = 3;
  cfg.meta.channels.push_back({MetaChannelKind::geo});
  cfg.meta.channels.push_back({MetaChannelKind::datetime});
  MetaFormer model(cfg, seed);
  Tensor img = Tensor::randn({2, 3, 64, 64}, rng, scalar(0.5));
  MetaRecord rec;
  rec.geo = GeoPoint{30, -60};
  rec.datetime = DateTimeInfo{7, 9};
  std::vector<MetaRecord> recs{rec, rec};
  const std::vector<std::int64_t> labels{0, 2};
  ParamList params = model.parameters();
  // 20 coordinates sampled across the whole parameter set
  std::vector<Tensor> leaves;
  for (auto& p : params) leaves.push_back(p.tensor);
  for (auto& leaf : leaves) leaf.zero_grad();
  ForwardContext ctx;
  auto loss_fn = [&] {
    return cross_entropy(model.forward(img, recs, ctx), labels, scalar(0));
  };
  Tensor loss = loss_fn();
  loss.backward();
  std::vector<std::vector<scalar>> analytic;
  for (auto& leaf : leaves) {
    analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
  }
  double worst = 0;
  NoGradGuard ng;
  for (int probe = 0; probe < 20; ++probe) {
    const std::size_t li =
        static_cast<std::size_t>(rng.uniform_int(leaves.size()));
    auto& leaf = leaves[li];
    const std::int64_t ci = static_cast<std::int64_t>(
        rng.uniform_int(static_cast<std::uint64_t>(leaf.numel())));
    auto data = leaf.mutable_data();
    const scalar orig = data[ci];
    const double h = 1e-5;
    data[ci] = orig + static_cast<scalar>(h);
    const double fp = static_cast<double>(loss_fn().item());
    data[ci] = orig - static_cast<scalar>(h);
    const double fm = static_cast<double>(loss_fn().item());
    data[ci] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = static_cast<double>(analytic[li][ci]);
    const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return {{"metaformer_tiny", worst}};
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck(const std::string& scope,
                                           std::uint64_t seed) {
  if (scope == "ops") return gradcheck_ops(seed);
  if (scope == "blocks") return gradcheck_blocks(seed);
  if (scope == "model") return gradcheck_model(seed);
  throw ValidationError(detail::cat("unknown gradcheck scope '", scope,
                                    "' (ops, blocks, model)"));
}

}  // namespace metaformer
