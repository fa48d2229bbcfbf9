#pragma once

#include <cstdint>
#include <vector>

#include "metaformer/nn.hpp"

namespace metaformer {

// Token sequence through the transformer stages: [class?; meta...; vision...]
// flattened along axis 1 of `tokens`.
struct TokenSequence {
  Tensor tokens;          // [B, n_extra + grid*grid, D]
  std::int64_t grid = 0;  // vision patch grid side M
  std::int64_t n_extra = 0;
  std::int64_t length() const { return n_extra + grid * grid; }
};

inline std::int64_t bias_table_len(std::int64_t m) {
  return (2 * m - 1) * (2 * m - 1) + 1;
}

// Pairwise bias index over a sequence of n_extra non-spatial tokens followed
// by an m*m vision grid. Vision pairs index by their 2-d offset; every pair
// touching a non-spatial token shares the single final slot.
std::vector<std::int32_t> build_index_map(std::int64_t m, std::int64_t n_extra);

struct AttentionSpec {
  std::int64_t dim = 0;
  std::int64_t head_dim = 32;
  std::int64_t heads() const {
    if (head_dim < 1 || dim % head_dim != 0) {
      throw ConfigError(detail::cat("attention: dim ", dim,
                                    " not divisible by head_dim ", head_dim));
    }
    return dim / head_dim;
  }
};

// Learned bias vector of length (2M-1)^2+1 per head plus the pair->slot map.
struct RelativeBiasTable {
  Tensor table;  // [heads, (2M-1)^2 + 1]
  std::vector<std::int32_t> index_map;
  std::int64_t grid = 0, n_extra = 0;

  RelativeBiasTable() = default;
  RelativeBiasTable(std::int64_t heads, std::int64_t m, std::int64_t n_extra,
                    Rng& rng);
  // Expanded [heads, T, T] bias for the current sequence layout.
  Tensor expanded() const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Multi-head self-attention core: qkv projection, per-head scaled dot
// product with the gathered relative bias, head merge, output projection.
// No residual or norm here.
struct RelativeAttention {
  AttentionSpec spec;
  Linear qkv, proj;

  RelativeAttention() = default;
  RelativeAttention(const AttentionSpec& spec, Rng& rng);
  Tensor forward(const Tensor& x, const RelativeBiasTable& bias,
                 const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Pre-LN transformer block: x + MSA(LN(x)), then the MLP half; stochastic
// depth on both branches at train time.
struct TransformerBlock {
  TokenLayerNorm norm;
  RelativeAttention attn;
  MlpBlock mlp;
  double drop_path_rate = 0.0;

  TransformerBlock() = default;
  TransformerBlock(std::int64_t dim, std::int64_t head_dim, double drop_rate,
                   Rng& rng);
  Tensor forward(const Tensor& x, const RelativeBiasTable& bias,
                 const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Strided conv tokenizer with kernel 3 > stride 2 (overlap) and a token
// layer norm; halves the grid and lifts channels.
struct OverlapPatchEmbed {
  Conv2dLayer conv;
  TokenLayerNorm norm;

  OverlapPatchEmbed() = default;
  OverlapPatchEmbed(std::int64_t in_ch, std::int64_t out_dim, Rng& rng);
  // x [B,C,H,W] with even H,W -> tokens [B, (H/2)*(W/2), out_dim]
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace metaformer
