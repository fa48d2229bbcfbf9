#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "metaformer/model.hpp"
#include "testutil.hpp"

using namespace metaformer;

namespace {

ModelConfig tiny_config(std::int64_t classes = 4) {
  ModelConfig cfg = ModelConfig::preset("tiny");
  cfg.num_classes = classes;
  return cfg;
}

MetaSchema geo_time_schema() {
  MetaSchema s;
  s.channels.push_back({MetaChannelKind::geo});
  s.channels.push_back({MetaChannelKind::datetime});
  return s;
}

std::int64_t registry_total(const MetaFormer& model) {
  std::int64_t total = 0;
  for (const auto& p : model.parameters()) total += p.tensor.numel();
  return total;
}

}  // namespace

TEST_CASE("presets match the published stage table field by field") {
  struct Row {
    const char* name;
    std::int64_t l[5], d[5];
    double drop;
  };
  const Row rows[] = {
      {"metaformer-0", {3, 2, 3, 5, 2}, {64, 96, 192, 384, 768}, 0.1},
      {"metaformer-1", {3, 2, 6, 14, 2}, {64, 96, 192, 384, 768}, 0.2},
      {"metaformer-2", {3, 2, 6, 14, 2}, {128, 128, 256, 512, 1024}, 0.3},
  };
  const StageKind kinds[5] = {StageKind::conv_stem, StageKind::mbconv,
                              StageKind::mbconv, StageKind::transformer,
                              StageKind::transformer};
  for (const auto& row : rows) {
    ModelConfig cfg = ModelConfig::preset(row.name);
    for (int i = 0; i < 5; ++i) {
      CHECK(cfg.stages[i].kind == kinds[i]);
      CHECK(cfg.stages[i].blocks == row.l[i]);
      CHECK(cfg.stages[i].dim == row.d[i]);
    }
    CHECK(cfg.image_size == 224);
    CHECK(cfg.max_drop_path == doctest::Approx(row.drop));
    CHECK(cfg.mode == ClassTokenMode::parallel);
  }
  CHECK_THROWS_AS(ModelConfig::preset("metaformer-9"), ConfigError);
}

TEST_CASE("spatial halving chain") {
  ModelConfig mf0 = ModelConfig::preset("metaformer-0");
  auto plan = mf0.spatial_plan();
  CHECK(plan == std::array<std::int64_t, 5>{112, 56, 28, 14, 7});

  ModelConfig tiny = tiny_config();
  CHECK(tiny.spatial_plan() == std::array<std::int64_t, 5>{32, 16, 8, 4, 2});

  ModelConfig bad = tiny;
  bad.image_size = 48;  // not divisible by 32
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("tiny forward produces logits and the expected grids") {
  MetaFormer model(tiny_config(5), 42);
  CHECK(model.bias3.grid == 4);
  CHECK(model.bias4.grid == 2);
  Rng rng(1);
  Tensor img = Tensor::randn({2, 3, 64, 64}, rng);
  Tensor logits = model.forward(img, {}, ForwardContext{});
  CHECK(logits.shape() == Shape{2, 5});

  Tensor wrong = Tensor::randn({2, 3, 32, 32}, rng);
  CHECK_THROWS_AS(model.forward(wrong, {}, ForwardContext{}), ShapeError);
}

TEST_CASE("meta records are rejected without a schema and change logits with one") {
  Rng rng(2);
  Tensor img = Tensor::randn({1, 3, 64, 64}, rng);
  MetaRecord rec;
  rec.geo = GeoPoint{12, 100};
  rec.datetime = DateTimeInfo{6, 14};
  std::vector<MetaRecord> recs{rec};

  MetaFormer plain(tiny_config(), 7);
  CHECK_THROWS_AS(plain.forward(img, recs, ForwardContext{}), ContractError);

  ModelConfig cfg = tiny_config();
  cfg.meta = geo_time_schema();
  MetaFormer with_meta(cfg, 7);
  Tensor with = with_meta.forward(img, recs, ForwardContext{});
  Tensor without = with_meta.forward(img, {}, ForwardContext{});
  bool differ = false;
  for (std::int64_t i = 0; i < with.numel(); ++i)
    differ |= (with.data()[i] != without.data()[i]);
  CHECK(differ);

  std::vector<MetaRecord> too_many{rec, rec};
  CHECK_THROWS_AS(with_meta.forward(img, too_many, ForwardContext{}), ShapeError);
}

TEST_CASE("fully masked meta equals the null-meta forward bit-exactly") {
  ModelConfig cfg = tiny_config();
  cfg.meta = geo_time_schema();
  MetaFormer model(cfg, 11);
  Rng rng(3);
  Tensor img = Tensor::randn({2, 3, 64, 64}, rng);
  MetaRecord rec;
  rec.geo = GeoPoint{-40, 20};
  rec.datetime = DateTimeInfo{2, 3};
  std::vector<MetaRecord> recs{rec, rec};

  Rng r1(77), r2(78);
  ForwardContext all_masked;
  all_masked.training = true;
  all_masked.mask_ratio = 1.0;
  all_masked.rng = &r1;
  ForwardContext null_meta;
  null_meta.training = true;
  null_meta.mask_ratio = 1.0;
  null_meta.rng = &r2;
  NoGradGuard ng;
  Tensor a = model.forward(img, recs, all_masked);
  Tensor b = model.forward(img, {}, null_meta);
  for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("aggregate layer selects the final token when the kernel says so") {
  Rng rng(4);
  AggregateLayer agg(6, 8, rng);
  // zero the lifted slot, identity on the final slot
  for (std::int64_t c = 0; c < 8; ++c) {
    agg.fuse_w.mutable_data()[c] = 0;      // row 0: lifted token
    agg.fuse_w.mutable_data()[8 + c] = 1;  // row 1: final token
  }
  Tensor z1 = Tensor::randn({3, 6}, rng);
  Tensor z2 = Tensor::randn({3, 8}, rng);
  Tensor y = agg.forward(z1, z2);
  Tensor expected = agg.norm_out.forward(z2);
  CHECK(y.shape() == Shape{3, 8});
  for (std::int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(expected.data()[i]).epsilon(1e-12));
}

TEST_CASE("aggregate layer gradient") {
  Rng rng(5);
  AggregateLayer agg(4, 6, rng);
  Tensor z1 = testutil::random_tensor({2, 4}, rng);
  Tensor z2 = testutil::random_tensor({2, 6}, rng);
  ParamList params;
  agg.collect("agg", params);
  std::vector<Tensor> leaves{z1, z2};
  for (auto& p : params) leaves.push_back(p.tensor);
  Tensor mask = testutil::random_tensor({2, 6}, rng, false);
  double err = testutil::grad_rel_err(
      [&] { return sum_all(mul(agg.forward(z1, z2), mask)); }, leaves, 1e-5,
      120, &rng);
  CHECK(err < 1e-4);
}

TEST_CASE("all three class-token modes run and produce identical logit shapes") {
  Rng rng(6);
  Tensor img = Tensor::randn({2, 3, 64, 64}, rng);
  for (auto mode : {ClassTokenMode::gap, ClassTokenMode::serial,
                    ClassTokenMode::parallel}) {
    ModelConfig cfg = tiny_config(9);
    cfg.mode = mode;
    MetaFormer model(cfg, 13);
    Tensor logits = model.forward(img, {}, ForwardContext{});
    CHECK(logits.shape() == Shape{2, 9});
  }
}

TEST_CASE("zeroing the final class token leaves the early class path live") {
  ModelConfig cfg = tiny_config();
  cfg.mode = ClassTokenMode::parallel;
  MetaFormer model(cfg, 17);
  for (auto& v : model.class_token4.mutable_data()) v = 0;

  Rng rng(7);
  Tensor img = Tensor::randn({2, 3, 64, 64}, rng);
  Tensor loss = cross_entropy(model.forward(img, {}, ForwardContext{}), {1, 2},
                              0.0);
  loss.backward();
  double norm3 = 0;
  for (auto g : model.class_token3.grad()) norm3 += g * g;
  CHECK(norm3 > 0.0);
  double norm_expand = 0;
  for (auto g : model.aggregate.expand.w.grad()) norm_expand += g * g;
  CHECK(norm_expand > 0.0);
}

TEST_CASE("analytic parameter count equals a walk over the registry") {
  // every structural switch: modes, meta schema, head width, image size
  std::vector<ModelConfig> cases;
  cases.push_back(tiny_config());
  {
    ModelConfig c = tiny_config();
    c.mode = ClassTokenMode::serial;
    cases.push_back(c);
  }
  {
    ModelConfig c = tiny_config();
    c.mode = ClassTokenMode::gap;
    cases.push_back(c);
  }
  {
    ModelConfig c = tiny_config();
    c.meta = geo_time_schema();
    MetaChannel attr{MetaChannelKind::attribute};
    attr.attr_dim = 12;
    c.meta.channels.push_back(attr);
    MetaChannel text{MetaChannelKind::text};
    text.vocab = 30;
    text.max_len = 5;
    text.word_dim = 8;
    c.meta.channels.push_back(text);
    cases.push_back(c);
  }
  {
    ModelConfig c = tiny_config();
    c.head_dim = 8;
    cases.push_back(c);
  }
  {
    ModelConfig c = tiny_config();
    c.image_size = 128;
    cases.push_back(c);
  }
  for (const auto& cfg : cases) {
    MetaFormer model(cfg, 3);
    CHECK(count_params(cfg) == registry_total(model));
  }
}

TEST_CASE("parameter count tracks image size only through the bias tables") {
  ModelConfig small = tiny_config();
  ModelConfig big = tiny_config();
  big.image_size = 128;
  const std::int64_t heads3 = small.stages[3].dim / small.head_dim;
  const std::int64_t heads4 = small.stages[4].dim / small.head_dim;
  const std::int64_t expected_delta =
      heads3 * (bias_table_len(8) - bias_table_len(4)) +
      heads4 * (bias_table_len(4) - bias_table_len(2));
  CHECK(count_params(big) - count_params(small) == expected_delta);
}

TEST_CASE("mac counting covers the hand formula for a single conv") {
  // 1x1 conv MACs over a known shape: H*W*Cin*Cout, flops double that
  ModelConfig cfg = tiny_config();
  const std::int64_t macs = count_macs(cfg, 64);
  const std::int64_t flops = count_flops(cfg, 64);
  CHECK(flops == 2 * macs);
}

TEST_CASE("published parameter and compute budgets") {
  struct Row {
    const char* name;
    double params, macs224, macs384;
  };
  const Row rows[] = {{"metaformer-0", 28e6, 4.6e9, 13.4e9},
                      {"metaformer-1", 45e6, 8.5e9, 24.7e9},
                      {"metaformer-2", 81e6, 16.9e9, 49.7e9}};
  for (const auto& row : rows) {
    ModelConfig cfg = ModelConfig::preset(row.name);
    const double p = static_cast<double>(count_params(cfg));
    CHECK(std::abs(p - row.params) / row.params < 0.03);
    const double m224 = static_cast<double>(count_macs(cfg, 224));
    CHECK(std::abs(m224 - row.macs224) / row.macs224 < 0.15);
    const double m384 = static_cast<double>(count_macs(cfg, 384));
    CHECK(std::abs(m384 - row.macs384) / row.macs384 < 0.15);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  ModelConfig cfg = tiny_config();
  cfg.meta = geo_time_schema();
  MetaFormer model(cfg, 23);
  Rng rng(8);
  Tensor img = Tensor::randn({1, 3, 64, 64}, rng);
  NoGradGuard ng;
  Tensor before = model.forward(img, {}, ForwardContext{});

  const char* path = "test_ckpt.mfck";
  save_checkpoint(model, path);
  MetaFormer restored(cfg, 99);  // different init seed
  load_checkpoint(restored, path);
  Tensor after = restored.forward(img, {}, ForwardContext{});
  for (std::int64_t i = 0; i < before.numel(); ++i)
    CHECK(before.data()[i] == after.data()[i]);

  // two saves produce identical bytes
  const char* path2 = "test_ckpt2.mfck";
  save_checkpoint(model, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)),
                 std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)),
                 std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK(!s1.empty());
  std::remove(path2);

  // truncated file fails cleanly
  {
    std::ofstream trunc("test_trunc.mfck", std::ios::binary);
    trunc.write(s1.data(), static_cast<std::streamsize>(s1.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint(restored, "test_trunc.mfck"), IoError);
  std::remove("test_trunc.mfck");

  // config hash mismatch names both hashes
  ModelConfig other = tiny_config(17);
  other.meta = geo_time_schema();
  MetaFormer other_model(other, 1);
  try {
    load_checkpoint(other_model, path);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(std::to_string(cfg.hash())) != std::string::npos);
    CHECK(msg.find(std::to_string(other.hash())) != std::string::npos);
  }
  std::remove(path);
}

TEST_CASE("full tiny model gradient check on sampled coordinates") {
  ModelConfig cfg = tiny_config(3);
  cfg.meta = geo_time_schema();
  MetaFormer model(cfg, 31);
  Rng rng(9);
  Tensor img = Tensor::randn({2, 3, 64, 64}, rng, 0.5);
  MetaRecord rec;
  rec.geo = GeoPoint{30, -60};
  rec.datetime = DateTimeInfo{7, 9};
  std::vector<MetaRecord> recs{rec, rec};
  std::vector<std::int64_t> labels{0, 2};

  ParamList params = model.parameters();
  std::vector<Tensor> leaves;
  for (auto& p : params) leaves.push_back(p.tensor);
  ForwardContext ctx;  // eval-mode graph: smooth in the parameters
  double err = testutil::grad_rel_err(
      [&] {
        return cross_entropy(model.forward(img, recs, ctx), labels, 0.0);
      },
      leaves, 1e-5, 1, &rng);  // one random coordinate per parameter tensor
  CHECK(err < 1e-4);
}
