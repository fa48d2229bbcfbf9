#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metaformer/nn.hpp"

namespace metaformer {

constexpr std::int64_t kMaxSentenceLen = 32;

enum class MetaChannelKind { geo, datetime, attribute, text };

struct MetaChannel {
  MetaChannelKind kind;
  std::int64_t attr_dim = 0;   // attribute
  std::int64_t vocab = 0;      // text
  std::int64_t max_len = 0;    // text, <= 32
  std::int64_t word_dim = 0;   // text embedding width

  std::int64_t tokens() const {
    return kind == MetaChannelKind::text ? max_len : 1;
  }
  std::int64_t feature_dim() const;
};

struct MetaSchema {
  std::vector<MetaChannel> channels;

  bool empty() const { return channels.empty(); }
  std::int64_t total_tokens() const;
  void validate() const;
  std::string describe() const;  // canonical, feeds the config hash
};

struct GeoPoint {
  double lat = 0, lon = 0;  // degrees
};
struct DateTimeInfo {
  double month = 1, hour = 0;  // month in [1,12], hour in [0,24)
};

struct MetaRecord {
  std::optional<GeoPoint> geo;
  std::optional<DateTimeInfo> datetime;
  std::optional<std::vector<float>> attributes;
  std::optional<std::vector<std::vector<std::int32_t>>> sentences;
};

// [lat,lon] degrees -> unit vector [x,y,z]; wraps cleanly at +-180.
std::array<double, 3> encode_geo(double lat_deg, double lon_deg);
// [month,hour] -> [sin,cos of 2*pi*month/12, sin,cos of 2*pi*hour/24]
std::array<double, 4> encode_datetime(double month, double hour);
// Same mapping without range validation; the encoding is periodic, so
// out-of-range arguments are meaningful (month 0 == month 12).
std::array<double, 4> datetime_features_extended(double month, double hour);

// Linearly decreasing mask ratio: r(t) = r0 * (1 - t/total), clamped to
// [0,1]; steps past the end mask nothing.
struct MaskSchedule {
  double r0 = 1.0;
  std::int64_t total_steps = 1;
  double ratio(std::int64_t step) const;
};

// Plain-text embedding file: first line "vocab_size dim", then one line per
// token: "token v1 v2 ... v_dim" in row order.
struct WordEmbeddingData {
  std::int64_t vocab = 0, dim = 0;
  std::vector<std::string> tokens;
  std::vector<scalar> values;  // vocab x dim
};
WordEmbeddingData load_embedding_file(const std::string& path);

// Encodes per-sample meta records into [B, total_tokens, embed_dim] via a
// per-channel two-layer MLP (hidden 4x, gelu). Missing channels, text pad
// slots, and train-time masked slots all read the learned null embedding.
class MetaEncoder {
 public:
  MetaEncoder() = default;
  MetaEncoder(MetaSchema schema, std::int64_t embed_dim, Rng& rng);

  // Loads pre-trained word vectors into the text channel table (rows below
  // the reserved unk row); dims must match the schema.
  void load_word_vectors(const WordEmbeddingData& data);

  Tensor encode(std::span<const MetaRecord> records,
                const ForwardContext& ctx) const;

  const MetaSchema& schema() const { return schema_; }
  std::int64_t embed_dim() const { return embed_dim_; }
  const Tensor& null_token() const { return null_token_; }
  const Tensor& word_table() const { return word_table_; }

  void collect(const std::string& prefix, ParamList& out) const;

 private:
  struct ChannelMlp {
    Linear fc1, fc2;
  };
  MetaSchema schema_;
  std::int64_t embed_dim_ = 0;
  std::vector<ChannelMlp> mlps_;
  Tensor null_token_;  // [embed_dim]
  Tensor word_table_;  // [vocab+1, word_dim]; final row is unk
};

}  // namespace metaformer
