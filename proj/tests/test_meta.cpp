#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "metaformer/meta.hpp"
#include "testutil.hpp"

using namespace metaformer;

namespace {

MetaSchema geo_schema() {
  MetaSchema s;
  s.channels.push_back({MetaChannelKind::geo});
  return s;
}

MetaSchema full_schema() {
  MetaSchema s;
  s.channels.push_back({MetaChannelKind::geo});
  s.channels.push_back({MetaChannelKind::datetime});
  MetaChannel attr{MetaChannelKind::attribute};
  attr.attr_dim = 5;
  s.channels.push_back(attr);
  MetaChannel text{MetaChannelKind::text};
  text.vocab = 20;
  text.max_len = 4;
  text.word_dim = 6;
  s.channels.push_back(text);
  return s;
}

}  // namespace

TEST_CASE("geo encoding instantiations") {
  auto origin = encode_geo(0, 0);
  CHECK(origin[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(origin[1]) < 1e-12);
  CHECK(std::abs(origin[2]) < 1e-12);

  for (double lon : {0.0, 45.0, -120.0}) {
    auto pole = encode_geo(90, lon);
    CHECK(std::abs(pole[0]) < 1e-12);
    CHECK(std::abs(pole[1]) < 1e-12);
    CHECK(pole[2] == doctest::Approx(1.0).epsilon(1e-12));
  }

  auto east = encode_geo(0, 180);
  auto west = encode_geo(0, -180);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(east[i] - west[i]) < 1e-12);
}

TEST_CASE("geo encoding has unit norm for all valid inputs") {
  Rng rng(101);
  for (int trial = 0; trial < 1000; ++trial) {
    const double lat = rng.uniform(-90, 90);
    const double lon = rng.uniform(-180, 180);
    auto v = encode_geo(lat, lon);
    const double norm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    CHECK(std::abs(norm - 1.0) < 1e-12);
  }
}

TEST_CASE("geo validation names the offending field") {
  try {
    encode_geo(91, 0);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("geo.lat") != std::string::npos);
  }
  try {
    encode_geo(0, 181);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("geo.lon") != std::string::npos);
  }
}

TEST_CASE("datetime encoding matches the stated mapping") {
  // pointwise against the formula
  for (double month : {1.0, 3.0, 7.5, 12.0}) {
    for (double hour : {0.0, 5.25, 23.0}) {
      auto f = encode_datetime(month, hour);
      CHECK(f[0] == doctest::Approx(std::sin(2 * M_PI * month / 12)).epsilon(1e-15));
      CHECK(f[1] == doctest::Approx(std::cos(2 * M_PI * month / 12)).epsilon(1e-15));
      CHECK(f[2] == doctest::Approx(std::sin(2 * M_PI * hour / 24)).epsilon(1e-15));
      CHECK(f[3] == doctest::Approx(std::cos(2 * M_PI * hour / 24)).epsilon(1e-15));
      for (int i = 0; i < 4; ++i) {
        CHECK(f[i] >= -1.0);
        CHECK(f[i] <= 1.0);
      }
    }
  }

  // December meets the hypothetical month zero: sin 0, cos 1
  auto dec = encode_datetime(12, 0);
  auto zero = datetime_features_extended(0, 0);
  CHECK(std::abs(dec[0]) < 1e-12);
  CHECK(dec[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(dec[0] - zero[0]) < 1e-12);
  CHECK(std::abs(dec[1] - zero[1]) < 1e-12);

  // month periodicity on the extended domain
  for (double m : {0.5, 3.0, 11.0}) {
    auto a = datetime_features_extended(m, 6);
    auto b = datetime_features_extended(m + 12, 6);
    for (int i = 0; i < 4; ++i) CHECK(std::abs(a[i] - b[i]) < 1e-9);
  }

  // 23:59++ converges to midnight
  auto midnight = encode_datetime(6, 0);
  auto late = encode_datetime(6, 23.9999);
  double dist = std::hypot(midnight[2] - late[2], midnight[3] - late[3]);
  CHECK(dist < 1e-3);

  // month=3 pins sin(pi/2)=1
  auto march = encode_datetime(3, 12);
  CHECK(march[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(march[1]) < 1e-12);

  CHECK_THROWS_AS(encode_datetime(0.5, 0), ValidationError);
  CHECK_THROWS_AS(encode_datetime(6, 24), ValidationError);
}

TEST_CASE("mask schedule is linear from r0 to zero") {
  MaskSchedule sched{0.8, 1000};
  CHECK(sched.ratio(0) == doctest::Approx(0.8));
  CHECK(sched.ratio(1000) == doctest::Approx(0.0));
  CHECK(sched.ratio(2000) == doctest::Approx(0.0));  // clamp past the end
  double prev = 1.0;
  for (int i = 0; i <= 10; ++i) {
    const std::int64_t step = i * 100;
    const double r = sched.ratio(step);
    CHECK(r == doctest::Approx(0.8 * (1.0 - step / 1000.0)).epsilon(1e-12));
    CHECK(r <= prev);
    prev = r;
  }
  MaskSchedule off{0.0, 100};
  for (int s = 0; s <= 100; s += 10) CHECK(off.ratio(s) == 0.0);
}

TEST_CASE("meta encoder emits one token per schema slot") {
  Rng rng(103);
  MetaEncoder enc(full_schema(), 8, rng);
  CHECK(enc.schema().total_tokens() == 1 + 1 + 1 + 4);

  MetaRecord rec;
  rec.geo = GeoPoint{10, 20};
  rec.datetime = DateTimeInfo{5, 13};
  rec.attributes = std::vector<float>{1, 0, 1, 0, 1};
  rec.sentences = {{1, 2, 3}};
  std::vector<MetaRecord> batch{rec, MetaRecord{}};
  Tensor tokens = enc.encode(batch, ForwardContext{});
  CHECK(tokens.shape() == Shape{2, 7, 8});

  // record 2 is fully absent: every token equals the learned null embedding
  for (std::int64_t tok = 0; tok < 7; ++tok) {
    for (std::int64_t c = 0; c < 8; ++c) {
      CHECK(tokens.data()[(7 + tok) * 8 + c] == enc.null_token().data()[c]);
    }
  }
}

TEST_CASE("attribute encoding is a checked pass-through") {
  Rng rng(104);
  MetaSchema s;
  MetaChannel attr{MetaChannelKind::attribute};
  attr.attr_dim = 312;  // CUB-sized attribute list
  s.channels.push_back(attr);
  MetaEncoder enc(s, 8, rng);

  MetaRecord zeros;
  zeros.attributes = std::vector<float>(312, 0.f);
  std::vector<MetaRecord> batch{zeros, zeros};
  Tensor t1 = enc.encode(batch, ForwardContext{});
  // deterministic: same record, same token
  for (std::int64_t c = 0; c < 8; ++c) {
    CHECK(t1.data()[c] == t1.data()[8 + c]);
  }

  MetaRecord flipped = zeros;
  (*flipped.attributes)[200] = 1.0f;
  std::vector<MetaRecord> batch2{zeros, flipped};
  Tensor t2 = enc.encode(batch2, ForwardContext{});
  bool any_diff = false;
  for (std::int64_t c = 0; c < 8; ++c)
    any_diff |= (t2.data()[c] != t2.data()[8 + c]);
  CHECK(any_diff);

  MetaRecord wrong;
  wrong.attributes = std::vector<float>(10, 0.f);
  std::vector<MetaRecord> bad{wrong};
  CHECK_THROWS_AS(enc.encode(bad, ForwardContext{}), ValidationError);
}

TEST_CASE("text channel selection, truncation and unk mapping") {
  Rng rng(105);
  MetaSchema s;
  MetaChannel text{MetaChannelKind::text};
  text.vocab = 10;
  text.max_len = 4;
  text.word_dim = 6;
  s.channels.push_back(text);
  MetaEncoder enc(s, 8, rng);

  // single sentence: chosen with probability one, train or eval
  MetaRecord rec;
  rec.sentences = {{1, 2}};
  std::vector<MetaRecord> batch{rec};
  ForwardContext train;
  train.training = true;
  Rng trng(7);
  train.rng = &trng;
  Tensor a = enc.encode(batch, ForwardContext{});
  Tensor b = enc.encode(batch, train);
  for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);

  // truncation: tokens past max_len cannot influence the embedding
  MetaRecord longer1, longer2;
  longer1.sentences = {{1, 2, 3, 4, 5, 6, 7}};
  longer2.sentences = {{1, 2, 3, 4, 9, 9, 9}};
  std::vector<MetaRecord> lb{longer1, longer2};
  Tensor lt = enc.encode(lb, ForwardContext{});
  for (std::int64_t i = 0; i < lt.numel() / 2; ++i) {
    CHECK(lt.data()[i] == lt.data()[lt.numel() / 2 + i]);
  }

  // ids beyond the vocab land on the shared unk row
  MetaRecord unk1, unk2;
  unk1.sentences = std::vector<std::vector<std::int32_t>>{{15}};
  unk2.sentences = std::vector<std::vector<std::int32_t>>{{99}};
  std::vector<MetaRecord> ub{unk1, unk2};
  Tensor ut = enc.encode(ub, ForwardContext{});
  for (std::int64_t i = 0; i < ut.numel() / 2; ++i) {
    CHECK(ut.data()[i] == ut.data()[ut.numel() / 2 + i]);
  }

  MetaRecord empty;
  empty.sentences = std::vector<std::vector<std::int32_t>>{};
  std::vector<MetaRecord> eb{empty};
  CHECK_THROWS_AS(enc.encode(eb, ForwardContext{}), ValidationError);
}

TEST_CASE("sentence sampling is uniform over equal candidates") {
  Rng rng(106);
  MetaSchema s;
  MetaChannel text{MetaChannelKind::text};
  text.vocab = 10;
  text.max_len = 2;
  text.word_dim = 4;
  s.channels.push_back(text);
  MetaEncoder enc(s, 4, rng);

  MetaRecord rec;
  rec.sentences = {{0}, {1}, {2}, {3}};
  std::vector<MetaRecord> batch{rec};

  // reference token per sentence
  std::vector<std::vector<scalar>> refs;
  for (int k = 0; k < 4; ++k) {
    MetaRecord single;
    single.sentences = std::vector<std::vector<std::int32_t>>{{static_cast<std::int32_t>(k)}};
    std::vector<MetaRecord> sb{single};
    Tensor t = enc.encode(sb, ForwardContext{});
    refs.emplace_back(t.data().begin(), t.data().end());
  }

  Rng trng(9001);
  ForwardContext train;
  train.training = true;
  train.rng = &trng;
  int counts[4] = {0, 0, 0, 0};
  const int draws = 10000;
  for (int it = 0; it < draws; ++it) {
    Tensor t = enc.encode(batch, train);
    for (int k = 0; k < 4; ++k) {
      bool same = true;
      for (std::int64_t i = 0; i < t.numel() && same; ++i)
        same = (t.data()[i] == refs[k][i]);
      if (same) {
        ++counts[k];
        break;
      }
    }
  }
  const double expected = draws / 4.0;
  const double sigma = std::sqrt(draws * 0.25 * 0.75);
  int total = 0;
  for (int k = 0; k < 4; ++k) {
    total += counts[k];
    CHECK(std::abs(counts[k] - expected) < 3 * sigma);
  }
  CHECK(total == draws);
}

TEST_CASE("nonlinear embedding collapses to the bias with zero weights") {
  Rng rng(107);
  MetaEncoder enc(geo_schema(), 8, rng);
  ParamList params;
  enc.collect("meta", params);
  for (auto& p : params) {
    if (p.name == "meta.ch0.fc1.w" || p.name == "meta.ch0.fc2.w") {
      for (auto& v : p.tensor.mutable_data()) v = 0;
    }
    if (p.name == "meta.ch0.fc2.b") {
      for (std::int64_t i = 0; i < p.tensor.numel(); ++i)
        p.tensor.mutable_data()[i] = static_cast<scalar>(i + 1);
    }
  }
  MetaRecord rec;
  rec.geo = GeoPoint{45, 45};
  std::vector<MetaRecord> batch{rec};
  Tensor tokens = enc.encode(batch, ForwardContext{});
  for (std::int64_t c = 0; c < 8; ++c) {
    CHECK(tokens.data()[c] == doctest::Approx(double(c + 1)).epsilon(1e-12));
  }
}

TEST_CASE("meta encoder gradients flow into the channel mlps and null token") {
  Rng rng(108);
  MetaEncoder enc(geo_schema(), 6, rng);
  MetaRecord rec;
  rec.geo = GeoPoint{10, -30};
  std::vector<MetaRecord> batch{rec, MetaRecord{}};  // one present, one null
  ParamList params;
  enc.collect("meta", params);
  std::vector<Tensor> leaves;
  for (auto& p : params) leaves.push_back(p.tensor);
  Tensor mask = testutil::random_tensor({2, 1, 6}, rng, false);
  ForwardContext ctx;
  double err = testutil::grad_rel_err(
      [&] { return sum_all(mul(enc.encode(batch, ctx), mask)); }, leaves, 1e-5,
      150, &rng);
  CHECK(err < 1e-4);
}

TEST_CASE("mask rate matches the schedule empirically") {
  Rng rng(109);
  MetaEncoder enc(geo_schema(), 4, rng);
  MetaRecord rec;
  rec.geo = GeoPoint{0, 0};
  const int n = 10000;
  std::vector<MetaRecord> batch(n, rec);

  Tensor base = enc.encode(batch, ForwardContext{});
  Rng trng(555);
  ForwardContext train;
  train.training = true;
  train.rng = &trng;
  train.mask_ratio = 0.5;  // r0=1 halfway through the schedule
  Tensor masked = enc.encode(batch, train);
  int null_count = 0;
  for (int b = 0; b < n; ++b) {
    bool is_null = true;
    for (std::int64_t c = 0; c < 4 && is_null; ++c) {
      is_null = (masked.data()[b * 4 + c] == enc.null_token().data()[c]);
    }
    if (is_null) ++null_count;
  }
  const double sigma = std::sqrt(n * 0.25);
  CHECK(std::abs(null_count - n * 0.5) < 3 * sigma);

  // r0 = 0 never masks
  train.mask_ratio = 0.0;
  Tensor unmasked = enc.encode(batch, train);
  for (std::int64_t i = 0; i < base.numel(); ++i)
    CHECK(unmasked.data()[i] == base.data()[i]);
}

TEST_CASE("embedding file load and validation") {
  const char* path = "test_embedding.txt";
  {
    std::ofstream f(path);
    f << "3 4\n";
    f << "alpha 0.1 0.2 0.3 0.4\n";
    f << "beta 1 2 3 4\n";
    f << "gamma -1 -2 -3 -4\n";
  }
  WordEmbeddingData data = load_embedding_file(path);
  CHECK(data.vocab == 3);
  CHECK(data.dim == 4);
  CHECK(data.tokens[1] == "beta");
  CHECK(data.values[4] == doctest::Approx(1.0));

  Rng rng(110);
  MetaSchema s;
  MetaChannel text{MetaChannelKind::text};
  text.vocab = 3;
  text.max_len = 2;
  text.word_dim = 4;
  s.channels.push_back(text);
  MetaEncoder enc(s, 4, rng);
  enc.load_word_vectors(data);
  CHECK(enc.word_table().data()[0] == doctest::Approx(0.1));
  CHECK(enc.word_table().data()[7] == doctest::Approx(4.0));

  {
    std::ofstream f(path);
    f << "2 3\n";
    f << "a 1 2\n";  // row too short
  }
  CHECK_THROWS_AS(load_embedding_file(path), IoError);
  std::remove(path);

  CHECK_THROWS_AS(load_embedding_file("no_such_file.txt"), IoError);
}

TEST_CASE("schema validation") {
  MetaSchema s;
  MetaChannel text{MetaChannelKind::text};
  text.vocab = 5;
  text.max_len = 40;  // beyond the cap
  text.word_dim = 4;
  s.channels.push_back(text);
  CHECK_THROWS_AS(s.validate(), ConfigError);

  MetaSchema dup;
  dup.channels.push_back({MetaChannelKind::geo});
  dup.channels.push_back({MetaChannelKind::geo});
  CHECK_THROWS_AS(dup.validate(), ConfigError);
}
