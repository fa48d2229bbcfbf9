#include "metaformer/meta.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace metaformer {

std::int64_t MetaChannel::feature_dim() const {
  switch (kind) {
    case MetaChannelKind::geo: return 3;
    case MetaChannelKind::datetime: return 4;
    case MetaChannelKind::attribute: return attr_dim;
    case MetaChannelKind::text: return word_dim;
  }
  return 0;
}

std::int64_t MetaSchema::total_tokens() const {
  std::int64_t n = 0;
  for (const auto& c : channels) n += c.tokens();
  return n;
}

void MetaSchema::validate() const {
  bool seen[4] = {false, false, false, false};
  for (const auto& c : channels) {
    const int k = static_cast<int>(c.kind);
    if (seen[k]) throw ConfigError("meta schema: duplicate channel kind");
    seen[k] = true;
    switch (c.kind) {
      case MetaChannelKind::attribute:
        if (c.attr_dim < 1) {
          throw ConfigError("meta schema: attribute channel needs attr_dim >= 1");
        }
        break;
      case MetaChannelKind::text:
        if (c.vocab < 1 || c.word_dim < 1) {
          throw ConfigError("meta schema: text channel needs vocab and word_dim");
        }
        if (c.max_len < 1 || c.max_len > kMaxSentenceLen) {
          throw ConfigError(detail::cat("meta schema: text max_len ", c.max_len,
                                        " outside [1,", kMaxSentenceLen, "]"));
        }
        break;
      default:
        break;
    }
  }
}

std::string MetaSchema::describe() const {
  std::ostringstream os;
  for (const auto& c : channels) {
    switch (c.kind) {
      case MetaChannelKind::geo: os << "geo;"; break;
      case MetaChannelKind::datetime: os << "datetime;"; break;
      case MetaChannelKind::attribute: os << "attribute(" << c.attr_dim << ");"; break;
      case MetaChannelKind::text:
        os << "text(" << c.vocab << "," << c.max_len << "," << c.word_dim << ");";
        break;
    }
  }
  return os.str();
}

std::array<double, 3> encode_geo(double lat_deg, double lon_deg) {
  if (!(lat_deg >= -90.0 && lat_deg <= 90.0)) {
    throw ValidationError(detail::cat("geo.lat ", lat_deg,
                                      " outside [-90, 90] degrees"));
  }
  if (!(lon_deg >= -180.0 && lon_deg <= 180.0)) {
    throw ValidationError(detail::cat("geo.lon ", lon_deg,
                                      " outside [-180, 180] degrees"));
  }
  const double lat = lat_deg * M_PI / 180.0;
  const double lon = lon_deg * M_PI / 180.0;
  return {std::cos(lat) * std::cos(lon), std::cos(lat) * std::sin(lon),
          std::sin(lat)};
}

std::array<double, 4> datetime_features_extended(double month, double hour) {
  return {std::sin(2.0 * M_PI * month / 12.0), std::cos(2.0 * M_PI * month / 12.0),
          std::sin(2.0 * M_PI * hour / 24.0), std::cos(2.0 * M_PI * hour / 24.0)};
}

std::array<double, 4> encode_datetime(double month, double hour) {
  if (!(month >= 1.0 && month <= 12.0)) {
    throw ValidationError(detail::cat("datetime.month ", month,
                                      " outside [1, 12]"));
  }
  if (!(hour >= 0.0 && hour < 24.0)) {
    throw ValidationError(detail::cat("datetime.hour ", hour,
                                      " outside [0, 24)"));
  }
  return datetime_features_extended(month, hour);
}

double MaskSchedule::ratio(std::int64_t step) const {
  if (total_steps < 1) throw ConfigError("mask schedule: total_steps >= 1");
  if (step >= total_steps) return 0.0;
  const double t = step < 0 ? 0.0 : static_cast<double>(step);
  const double r = r0 * (1.0 - t / static_cast<double>(total_steps));
  return std::min(1.0, std::max(0.0, r));
}

WordEmbeddingData load_embedding_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(detail::cat("cannot open embedding file ", path));
  WordEmbeddingData data;
  std::string line;
  if (!std::getline(in, line)) {
    throw IoError(detail::cat("embedding file ", path, " is empty"));
  }
  {
    std::istringstream head(line);
    if (!(head >> data.vocab >> data.dim) || data.vocab < 1 || data.dim < 1) {
      throw IoError(detail::cat("embedding file ", path,
                                ": first line must be 'vocab_size dim'"));
    }
  }
  data.values.reserve(static_cast<std::size_t>(data.vocab * data.dim));
  for (std::int64_t r = 0; r < data.vocab; ++r) {
    if (!std::getline(in, line)) {
      throw IoError(detail::cat("embedding file ", path, ": expected ",
                                data.vocab, " rows, got ", r));
    }
    std::istringstream row(line);
    std::string token;
    if (!(row >> token)) {
      throw IoError(detail::cat("embedding file ", path, ": blank row ", r));
    }
    data.tokens.push_back(token);
    for (std::int64_t c = 0; c < data.dim; ++c) {
      double v;
      if (!(row >> v)) {
        throw IoError(detail::cat("embedding file ", path, ": row ", r,
                                  " has fewer than ", data.dim, " values"));
      }
      data.values.push_back(static_cast<scalar>(v));
    }
  }
  return data;
}

MetaEncoder::MetaEncoder(MetaSchema schema, std::int64_t embed_dim, Rng& rng)
    : schema_(std::move(schema)), embed_dim_(embed_dim) {
  schema_.validate();
  if (embed_dim_ < 1) throw ConfigError("meta encoder: embed_dim >= 1");
  for (const auto& c : schema_.channels) {
    ChannelMlp mlp;
    mlp.fc1 = Linear(c.feature_dim(), 4 * embed_dim_, rng);
    mlp.fc2 = Linear(4 * embed_dim_, embed_dim_, rng);
    mlps_.push_back(std::move(mlp));
    if (c.kind == MetaChannelKind::text) {
      word_table_ = Tensor::randn({c.vocab + 1, c.word_dim}, rng, scalar(0.02),
                                  true);
    }
  }
  null_token_ = Tensor::randn({embed_dim_}, rng, scalar(0.02), true);
}

void MetaEncoder::load_word_vectors(const WordEmbeddingData& data) {
  if (!word_table_.defined()) {
    throw ConfigError("load_word_vectors: schema has no text channel");
  }
  const std::int64_t vocab = word_table_.shape()[0] - 1;
  const std::int64_t dim = word_table_.shape()[1];
  if (data.vocab != vocab || data.dim != dim) {
    throw ConfigError(detail::cat("load_word_vectors: file is ", data.vocab,
                                  "x", data.dim, ", schema wants ", vocab, "x",
                                  dim));
  }
  auto dst = word_table_.mutable_data();
  std::copy(data.values.begin(), data.values.end(), dst.begin());
}

Tensor MetaEncoder::encode(std::span<const MetaRecord> records,
                           const ForwardContext& ctx) const {
  if (schema_.empty()) {
    throw ContractError("meta encode called with an empty schema");
  }
  const std::int64_t batch = static_cast<std::int64_t>(records.size());
  if (batch < 1) throw ContractError("meta encode: empty batch");
  const bool masking = ctx.training && ctx.mask_ratio > 0.0;
  if ((masking || ctx.training) && !ctx.rng) {
    throw ContractError("meta encode: training forward needs an rng");
  }

  std::vector<Tensor> channel_tokens;
  std::vector<double> keep;  // [batch x total_tokens], channel-major segments
  keep.reserve(static_cast<std::size_t>(batch * schema_.total_tokens()));

  for (std::size_t ci = 0; ci < schema_.channels.size(); ++ci) {
    const MetaChannel& ch = schema_.channels[ci];
    const ChannelMlp& mlp = mlps_[ci];
    if (ch.kind == MetaChannelKind::text) {
      const std::int64_t unk = ch.vocab;
      std::vector<std::int64_t> ids(
          static_cast<std::size_t>(batch * ch.max_len), unk);
      std::vector<double> present(static_cast<std::size_t>(batch * ch.max_len),
                                  0.0);
      for (std::int64_t b = 0; b < batch; ++b) {
        const auto& sent = records[b].sentences;
        if (!sent.has_value()) continue;
        if (sent->empty()) {
          throw ValidationError(detail::cat("record ", b,
                                            ": text channel present but the "
                                            "sentence list is empty"));
        }
        const std::size_t pick =
            ctx.training ? static_cast<std::size_t>(
                               ctx.rng->uniform_int(sent->size()))
                         : 0;
        const auto& words = (*sent)[pick];
        const std::int64_t len = std::min<std::int64_t>(
            static_cast<std::int64_t>(words.size()), ch.max_len);
        for (std::int64_t s = 0; s < len; ++s) {
          const std::int64_t id = words[static_cast<std::size_t>(s)];
          ids[b * ch.max_len + s] = (id >= 0 && id < ch.vocab) ? id : unk;
          present[b * ch.max_len + s] = 1.0;
        }
      }
      Tensor vecs = gather_rows(word_table_, ids);  // [B*max_len, word_dim]
      Tensor toks = mlp.fc2.forward(gelu(mlp.fc1.forward(vecs)));
      channel_tokens.push_back(reshape(toks, {batch, ch.max_len, embed_dim_}));
      keep.insert(keep.end(), present.begin(), present.end());
    } else {
      const std::int64_t fd = ch.feature_dim();
      Tensor feats(Shape{batch, fd});
      auto fdst = feats.mutable_data();
      std::vector<double> present(static_cast<std::size_t>(batch), 0.0);
      for (std::int64_t b = 0; b < batch; ++b) {
        const MetaRecord& rec = records[b];
        switch (ch.kind) {
          case MetaChannelKind::geo:
            if (rec.geo) {
              auto v = encode_geo(rec.geo->lat, rec.geo->lon);
              for (int i = 0; i < 3; ++i)
                fdst[b * fd + i] = static_cast<scalar>(v[i]);
              present[b] = 1.0;
            }
            break;
          case MetaChannelKind::datetime:
            if (rec.datetime) {
              auto v = encode_datetime(rec.datetime->month, rec.datetime->hour);
              for (int i = 0; i < 4; ++i)
                fdst[b * fd + i] = static_cast<scalar>(v[i]);
              present[b] = 1.0;
            }
            break;
          case MetaChannelKind::attribute:
            if (rec.attributes) {
              if (static_cast<std::int64_t>(rec.attributes->size()) !=
                  ch.attr_dim) {
                throw ValidationError(detail::cat(
                    "record ", b, ": attribute vector has ",
                    rec.attributes->size(), " entries, schema wants ",
                    ch.attr_dim));
              }
              for (std::int64_t i = 0; i < fd; ++i)
                fdst[b * fd + i] =
                    static_cast<scalar>((*rec.attributes)[static_cast<std::size_t>(i)]);
              present[b] = 1.0;
            }
            break;
          default:
            break;
        }
      }
      Tensor toks = mlp.fc2.forward(gelu(mlp.fc1.forward(feats)));
      channel_tokens.push_back(reshape(toks, {batch, 1, embed_dim_}));
      keep.insert(keep.end(), present.begin(), present.end());
    }
  }

  // keep[] was filled channel-major; rebuild it token-major per record.
  const std::int64_t n_tokens = schema_.total_tokens();
  Tensor keep_mask(Shape{batch, n_tokens, 1});
  auto km = keep_mask.mutable_data();
  std::int64_t col = 0;
  std::size_t src = 0;
  for (const auto& ch : schema_.channels) {
    const std::int64_t tk = ch.tokens();
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t s = 0; s < tk; ++s) {
        km[(b * n_tokens + col + s)] =
            static_cast<scalar>(keep[src + b * tk + s]);
      }
    }
    src += static_cast<std::size_t>(batch * tk);
    col += tk;
  }
  // train-time mask: each kept token independently nulled with prob r(step)
  if (masking) {
    for (std::int64_t i = 0; i < batch * n_tokens; ++i) {
      if (ctx.rng->bernoulli(ctx.mask_ratio)) km[i] = scalar(0);
    }
  }

  Tensor raw = concat(channel_tokens, 1);  // [B, n_tokens, D]
  Tensor null_b =
      broadcast_to(reshape(null_token_, {1, 1, embed_dim_}),
                   {batch, n_tokens, embed_dim_});
  Tensor inv = sub(Tensor::ones({batch, n_tokens, 1}), keep_mask);
  return add(mul(raw, keep_mask), mul(null_b, inv));
}

void MetaEncoder::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t ci = 0; ci < mlps_.size(); ++ci) {
    mlps_[ci].fc1.collect(detail::cat(prefix, ".ch", ci, ".fc1"), out);
    mlps_[ci].fc2.collect(detail::cat(prefix, ".ch", ci, ".fc2"), out);
  }
  if (word_table_.defined()) {
    out.push_back({prefix + ".word_table", word_table_, false});
  }
  out.push_back({prefix + ".null", null_token_, false});
}

}  // namespace metaformer
