#include "metaformer/model.hpp"

#include <cmath>

namespace metaformer {

namespace {

// Mirrors MBConv construction; keep the two in sync.
std::int64_t mbconv_params(std::int64_t in, std::int64_t out) {
  const std::int64_t mid = 4 * in;
  const std::int64_t se_hidden = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::lround(in * 0.25)));
  std::int64_t p = 0;
  p += in * mid;             // expand 1x1, no bias
  p += 2 * mid;              // n1
  p += mid * 9;              // depthwise 3x3, no bias
  p += 2 * mid;              // n2
  p += mid * se_hidden + se_hidden;  // se fc1
  p += se_hidden * mid + mid;        // se fc2
  p += mid * out;            // project 1x1, no bias
  p += 2 * out;              // n3
  return p;
}

std::int64_t transformer_block_params(std::int64_t d) {
  std::int64_t p = 0;
  p += 2 * d;                  // pre-attention norm
  p += d * 3 * d + 3 * d;      // qkv
  p += d * d + d;              // proj
  p += 2 * d;                  // mlp norm
  p += d * 4 * d + 4 * d;      // fc1
  p += 4 * d * d + d;          // fc2
  return p;
}

std::int64_t channel_mlp_params(std::int64_t feat, std::int64_t d3) {
  return feat * 4 * d3 + 4 * d3 + 4 * d3 * d3 + d3;
}

}  // namespace

std::int64_t count_params(const ModelConfig& cfg) {
  cfg.validate();
  const auto& st = cfg.stages;
  const std::int64_t d0 = st[0].dim, d1 = st[1].dim, d2 = st[2].dim,
                     d3 = st[3].dim, d4 = st[4].dim;
  const auto plan = cfg.spatial_plan();
  std::int64_t p = 0;

  // stem: widths D0/2 ... D0/2, D0
  {
    const std::int64_t mid = std::max<std::int64_t>(d0 / 2, 1);
    std::int64_t prev = 3;
    for (std::int64_t i = 0; i < st[0].blocks; ++i) {
      const std::int64_t ch = (i == st[0].blocks - 1) ? d0 : mid;
      p += prev * ch * 9;  // 3x3 conv, no bias
      p += 2 * ch;         // channel norm
      prev = ch;
    }
  }
  for (std::int64_t i = 0; i < st[1].blocks; ++i) {
    p += mbconv_params(i == 0 ? d0 : d1, d1);
  }
  for (std::int64_t i = 0; i < st[2].blocks; ++i) {
    p += mbconv_params(i == 0 ? d1 : d2, d2);
  }
  // patch embeds: 3x3 conv with bias + token norm
  p += d2 * d3 * 9 + d3 + 2 * d3;
  p += d3 * d4 * 9 + d4 + 2 * d4;
  // relative bias tables, one per stage, per head
  p += (d3 / cfg.head_dim) * bias_table_len(plan[3]);
  p += (d4 / cfg.head_dim) * bias_table_len(plan[4]);
  p += st[3].blocks * transformer_block_params(d3);
  p += st[4].blocks * transformer_block_params(d4);

  if (cfg.mode != ClassTokenMode::gap) p += d3;  // class token 3
  if (cfg.mode == ClassTokenMode::parallel) p += d4;
  const bool needs_lift =
      cfg.mode == ClassTokenMode::serial || !cfg.meta.empty();
  if (needs_lift) p += d3 * d4 + d4;
  if (cfg.mode == ClassTokenMode::parallel) {
    p += 2 * d3;            // aggregate norm_in
    p += d3 * d4 + d4;      // expand
    p += 2 * d4 + d4;       // fuse kernel + bias
    p += 2 * d4;            // norm_out
  } else {
    p += 2 * d4;            // final norm
  }
  p += d4 * cfg.num_classes + cfg.num_classes;  // head

  if (!cfg.meta.empty()) {
    for (const auto& ch : cfg.meta.channels) {
      p += channel_mlp_params(ch.feature_dim(), d3);
      if (ch.kind == MetaChannelKind::text) {
        p += (ch.vocab + 1) * ch.word_dim;
      }
    }
    p += d3;  // null token
  }
  return p;
}

std::int64_t count_macs(const ModelConfig& cfg, std::int64_t image_size) {
  ModelConfig c = cfg;
  c.image_size = image_size;
  c.validate();
  const auto& st = c.stages;
  const std::int64_t d0 = st[0].dim, d1 = st[1].dim, d2 = st[2].dim,
                     d3 = st[3].dim, d4 = st[4].dim;
  const auto plan = c.spatial_plan();
  const std::int64_t s0 = plan[0] * plan[0], s1sq = plan[1] * plan[1],
                     s2sq = plan[2] * plan[2], m3 = plan[3], m4 = plan[4];
  const std::int64_t n_meta = c.meta.total_tokens();
  const std::int64_t t3 = c.extra_tokens() + m3 * m3;
  const std::int64_t t4 = c.extra_tokens() + m4 * m4;
  std::int64_t macs = 0;

  // stem (first conv already runs at the halved output resolution)
  {
    const std::int64_t mid = std::max<std::int64_t>(d0 / 2, 1);
    std::int64_t prev = 3;
    for (std::int64_t i = 0; i < st[0].blocks; ++i) {
      const std::int64_t ch = (i == st[0].blocks - 1) ? d0 : mid;
      macs += 9 * prev * ch * s0;
      prev = ch;
    }
  }
  auto mbconv_macs = [](std::int64_t in, std::int64_t out, std::int64_t sp_in,
                        std::int64_t sp_out) {
    const std::int64_t mid = 4 * in;
    const std::int64_t se_hidden = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(std::lround(in * 0.25)));
    std::int64_t m = 0;
    m += in * mid * sp_in;       // expand at input resolution
    m += 9 * mid * sp_out;       // depthwise at output resolution
    m += 2 * mid * se_hidden;    // SE fc pair (per sample)
    m += mid * out * sp_out;     // project
    return m;
  };
  for (std::int64_t i = 0; i < st[1].blocks; ++i) {
    macs += i == 0 ? mbconv_macs(d0, d1, s0, s1sq)
                   : mbconv_macs(d1, d1, s1sq, s1sq);
  }
  for (std::int64_t i = 0; i < st[2].blocks; ++i) {
    macs += i == 0 ? mbconv_macs(d1, d2, s2sq, s2sq)
                   : mbconv_macs(d2, d2, s2sq, s2sq);
  }
  auto transformer_macs = [](std::int64_t d, std::int64_t t) {
    std::int64_t m = 0;
    m += t * d * 3 * d;   // qkv
    m += t * t * d;       // attention logits
    m += t * t * d;       // attention values
    m += t * d * d;       // output projection
    m += 2 * t * d * 4 * d;  // mlp
    return m;
  };
  macs += 9 * d2 * d3 * m3 * m3;  // patch embed into S3
  macs += st[3].blocks * transformer_macs(d3, t3);
  macs += 9 * d3 * d4 * m4 * m4;  // patch embed into S4
  macs += st[4].blocks * transformer_macs(d4, t4);

  // extras crossing the stage boundary
  std::int64_t lifted = n_meta;
  if (c.mode == ClassTokenMode::serial) lifted += 1;
  macs += lifted * d3 * d4;
  if (c.mode == ClassTokenMode::parallel) {
    macs += d3 * d4;  // aggregate expand
    macs += 2 * d4;   // depthwise fuse
  }
  macs += d4 * c.num_classes;

  if (!c.meta.empty()) {
    for (const auto& ch : c.meta.channels) {
      macs += ch.tokens() * (ch.feature_dim() * 4 * d3 + 4 * d3 * d3);
    }
  }
  return macs;
}

std::int64_t count_flops(const ModelConfig& cfg, std::int64_t image_size) {
  return 2 * count_macs(cfg, image_size);
}

}  // namespace metaformer
