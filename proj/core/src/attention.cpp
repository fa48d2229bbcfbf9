#include "metaformer/attention.hpp"

#include <cmath>

namespace metaformer {

std::vector<std::int32_t> build_index_map(std::int64_t m, std::int64_t n_extra) {
  if (m < 1 || n_extra < 0) {
    throw ConfigError("build_index_map: need m >= 1 and n_extra >= 0");
  }
  const std::int64_t t = n_extra + m * m;
  const std::int32_t shared =
      static_cast<std::int32_t>((2 * m - 1) * (2 * m - 1));
  std::vector<std::int32_t> map(static_cast<std::size_t>(t * t), shared);
  for (std::int64_t i = 0; i < m * m; ++i) {
    const std::int64_t ri = i / m, ci = i % m;
    for (std::int64_t j = 0; j < m * m; ++j) {
      const std::int64_t rj = j / m, cj = j % m;
      const std::int64_t dr = ri - rj + (m - 1);
      const std::int64_t dc = ci - cj + (m - 1);
      map[(n_extra + i) * t + (n_extra + j)] =
          static_cast<std::int32_t>(dr * (2 * m - 1) + dc);
    }
  }
  return map;
}

RelativeBiasTable::RelativeBiasTable(std::int64_t heads, std::int64_t m,
                                     std::int64_t n_extra_, Rng& rng)
    : index_map(build_index_map(m, n_extra_)), grid(m), n_extra(n_extra_) {
  table = Tensor::randn({heads, bias_table_len(m)}, rng, scalar(0.02), true);
}

Tensor RelativeBiasTable::expanded() const {
  return gather_bias(table, index_map, n_extra + grid * grid);
}

void RelativeBiasTable::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".table", table, false});
}

RelativeAttention::RelativeAttention(const AttentionSpec& s, Rng& rng)
    : spec(s),
      qkv(s.dim, 3 * s.dim, rng),
      proj(s.dim, s.dim, rng) {
  spec.heads();  // validates divisibility
}

Tensor RelativeAttention::forward(const Tensor& x, const RelativeBiasTable& bias,
                                  const ForwardContext& ctx) const {
  if (x.rank() != 3 || x.shape()[2] != spec.dim) {
    throw ShapeError(detail::cat("attention: expected [B,T,", spec.dim,
                                 "], got ", shape_str(x.shape())));
  }
  const std::int64_t batch = x.shape()[0];
  const std::int64_t t = x.shape()[1];
  const std::int64_t heads = spec.heads();
  const std::int64_t hd = spec.head_dim;
  if (bias.n_extra + bias.grid * bias.grid != t) {
    throw ShapeError(detail::cat("attention: bias table built for ",
                                 bias.n_extra + bias.grid * bias.grid,
                                 " tokens, sequence has ", t));
  }

  Tensor qkv_out = qkv.forward(x);  // [B, T, 3*D]
  Tensor split = permute(reshape(qkv_out, {batch, t, 3, heads, hd}),
                         {2, 0, 3, 1, 4});  // [3, B, heads, T, hd]
  Tensor q = reshape(slice(split, 0, 0, 1), {batch, heads, t, hd});
  Tensor k = reshape(slice(split, 0, 1, 1), {batch, heads, t, hd});
  Tensor v = reshape(slice(split, 0, 2, 1), {batch, heads, t, hd});

  const scalar scl =
      static_cast<scalar>(1.0 / std::sqrt(static_cast<double>(hd)));
  Tensor logits = attention_scores(q, k, scl, bias.expanded());
  Tensor probs = softmax(logits, 3);
  if (ctx.attn_sink) ctx.attn_sink->push_back(probs.detach());
  Tensor ctx_heads = attention_apply(probs, v);  // [B, heads, T, hd]
  Tensor merged =
      reshape(permute(ctx_heads, {0, 2, 1, 3}), {batch, t, spec.dim});
  return proj.forward(merged);
}

void RelativeAttention::collect(const std::string& prefix, ParamList& out) const {
  qkv.collect(prefix + ".qkv", out);
  proj.collect(prefix + ".proj", out);
}

TransformerBlock::TransformerBlock(std::int64_t dim, std::int64_t head_dim,
                                   double drop_rate, Rng& rng)
    : norm(dim),
      attn(AttentionSpec{dim, head_dim}, rng),
      mlp(dim, rng),
      drop_path_rate(drop_rate) {}

Tensor TransformerBlock::forward(const Tensor& x, const RelativeBiasTable& bias,
                                 const ForwardContext& ctx) const {
  Tensor attended = attn.forward(norm.forward(x), bias, ctx);
  Tensor h = add(x, drop_path(attended, drop_path_rate, ctx));
  return mlp.forward(h, ctx, drop_path_rate);
}

void TransformerBlock::collect(const std::string& prefix, ParamList& out) const {
  norm.collect(prefix + ".norm", out);
  attn.collect(prefix + ".attn", out);
  mlp.collect(prefix + ".mlp", out);
}

OverlapPatchEmbed::OverlapPatchEmbed(std::int64_t in_ch, std::int64_t out_dim,
                                     Rng& rng)
    : conv(in_ch, out_dim, 3, 2, 1, 1, true, rng), norm(out_dim) {}

Tensor OverlapPatchEmbed::forward(const Tensor& x) const {
  if (x.rank() != 4) throw ShapeError("patch embed: input must be [B,C,H,W]");
  if (x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0) {
    throw ShapeError(detail::cat("patch embed: spatial dims must be even, got ",
                                 shape_str(x.shape())));
  }
  Tensor fm = conv.forward(x);  // [B, D, H/2, W/2]
  const std::int64_t batch = fm.shape()[0], d = fm.shape()[1],
                     oh = fm.shape()[2], ow = fm.shape()[3];
  Tensor tokens = reshape(permute(fm, {0, 2, 3, 1}), {batch, oh * ow, d});
  return norm.forward(tokens);
}

void OverlapPatchEmbed::collect(const std::string& prefix, ParamList& out) const {
  conv.collect(prefix + ".conv", out);
  norm.collect(prefix + ".norm", out);
}

}  // namespace metaformer
