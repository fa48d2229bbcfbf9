#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metaformer/attention.hpp"
#include "metaformer/meta.hpp"
#include "metaformer/nn.hpp"

namespace metaformer {

enum class ClassTokenMode { gap, serial, parallel };
enum class StageKind { conv_stem, mbconv, transformer };

const char* to_string(ClassTokenMode mode);
ClassTokenMode class_token_mode_from(const std::string& name);

struct StageConfig {
  StageKind kind;
  std::int64_t blocks = 1;  // L
  std::int64_t dim = 1;     // D
};

struct ModelConfig {
  // S0 conv stem, S1-S2 MBConv, S3-S4 transformer.
  std::array<StageConfig, 5> stages{};
  std::int64_t num_classes = 1000;
  std::int64_t image_size = 224;
  ClassTokenMode mode = ClassTokenMode::parallel;
  std::int64_t head_dim = 32;
  double max_drop_path = 0.0;
  MetaSchema meta;

  static ModelConfig preset(const std::string& name);
  static std::vector<std::string> preset_names();

  void validate() const;
  // Per-stage output grid sides: image/2, /4, /8, /16, /32.
  std::array<std::int64_t, 5> spatial_plan() const;
  std::int64_t extra_tokens() const {  // class token (if any) + meta tokens
    return (mode == ClassTokenMode::gap ? 0 : 1) + meta.total_tokens();
  }
  std::string canonical_string() const;
  std::uint64_t hash() const;
};

// Eq-style two-token fusion: lift the earlier class token to the final
// width, stack with the final class token, fuse with a depthwise 1-d conv
// (kernel 2 over the stack axis, one filter per channel), then norm.
struct AggregateLayer {
  TokenLayerNorm norm_in;
  Linear expand;
  Tensor fuse_w;  // [2, D4]: row 0 weights the lifted token, row 1 the final
  Tensor fuse_b;  // [D4]
  TokenLayerNorm norm_out;

  AggregateLayer() = default;
  AggregateLayer(std::int64_t d3, std::int64_t d4, Rng& rng);
  Tensor forward(const Tensor& z1, const Tensor& z2) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Extra outputs for analysis/export paths.
struct ForwardArtifacts {
  Tensor logits;
  Tensor s4_tokens;  // [B, T4, D4] final token states (pre head)
  std::int64_t s4_grid = 0;
  std::int64_t s4_extra = 0;
  std::vector<Tensor> attn_probs;  // per block when a sink was requested
};

class MetaFormer {
 public:
  MetaFormer(ModelConfig config, std::uint64_t seed);

  // images [B,3,S,S]; meta empty -> learned null embeddings (when the
  // schema declares channels); meta non-empty requires one record per image.
  Tensor forward(const Tensor& images, std::span<const MetaRecord> meta,
                 const ForwardContext& ctx) const;
  ForwardArtifacts forward_full(const Tensor& images,
                                std::span<const MetaRecord> meta,
                                const ForwardContext& ctx) const;

  ParamList parameters() const;
  const ModelConfig& config() const { return config_; }

  // submodules exposed for white-box tests
  ConvStem stem;
  std::vector<MBConv> s1, s2;
  OverlapPatchEmbed embed3, embed4;
  RelativeBiasTable bias3, bias4;
  std::vector<TransformerBlock> s3, s4;
  Tensor class_token3;  // [D3], serial/parallel
  Tensor class_token4;  // [D4], parallel
  Linear extra_lift;    // D3 -> D4 for tokens crossing the stage boundary
  AggregateLayer aggregate;
  TokenLayerNorm final_norm;  // serial/gap
  Linear head;
  MetaEncoder meta_encoder;

 private:
  ModelConfig config_;
};

// ---- analytic accounting ----

// Exact count of learnable scalars the config instantiates.
std::int64_t count_params(const ModelConfig& config);
// Multiply-accumulate count of one single-image forward pass. Only
// MAC-bearing ops count (convs, dense layers, attention logits/values);
// norms and activations do not.
std::int64_t count_macs(const ModelConfig& config, std::int64_t image_size);
// FLOPs under the 1 MAC = 2 FLOPs convention.
std::int64_t count_flops(const ModelConfig& config, std::int64_t image_size);

// ---- checkpoint io ----
// Binary format: "MFCK", u32 version, u64 config hash, u32 scalar bits,
// u32 record count, then per parameter: u32 name length, name bytes,
// u32 rank, u64 dims, raw little-endian payload.
void save_checkpoint(const MetaFormer& model, const std::string& path);
void load_checkpoint(MetaFormer& model, const std::string& path);

}  // namespace metaformer
