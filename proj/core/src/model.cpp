#include "metaformer/model.hpp"

#include <cmath>

namespace metaformer {

const char* to_string(ClassTokenMode mode) {
  switch (mode) {
    case ClassTokenMode::gap: return "gap";
    case ClassTokenMode::serial: return "serial";
    case ClassTokenMode::parallel: return "parallel";
  }
  return "?";
}

ClassTokenMode class_token_mode_from(const std::string& name) {
  if (name == "gap") return ClassTokenMode::gap;
  if (name == "serial") return ClassTokenMode::serial;
  if (name == "parallel") return ClassTokenMode::parallel;
  throw ConfigError(detail::cat("unknown class token mode '", name,
                                "' (gap, serial, parallel)"));
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig cfg;
  auto stage = [](StageKind k, std::int64_t l, std::int64_t d) {
    return StageConfig{k, l, d};
  };
  if (name == "metaformer-0") {
    cfg.stages = {stage(StageKind::conv_stem, 3, 64),
                  stage(StageKind::mbconv, 2, 96),
                  stage(StageKind::mbconv, 3, 192),
                  stage(StageKind::transformer, 5, 384),
                  stage(StageKind::transformer, 2, 768)};
    cfg.max_drop_path = 0.1;
  } else if (name == "metaformer-1") {
    cfg.stages = {stage(StageKind::conv_stem, 3, 64),
                  stage(StageKind::mbconv, 2, 96),
                  stage(StageKind::mbconv, 6, 192),
                  stage(StageKind::transformer, 14, 384),
                  stage(StageKind::transformer, 2, 768)};
    cfg.max_drop_path = 0.2;
  } else if (name == "metaformer-2") {
    cfg.stages = {stage(StageKind::conv_stem, 3, 128),
                  stage(StageKind::mbconv, 2, 128),
                  stage(StageKind::mbconv, 6, 256),
                  stage(StageKind::transformer, 14, 512),
                  stage(StageKind::transformer, 2, 1024)};
    cfg.max_drop_path = 0.3;
  } else if (name == "tiny") {
    cfg.stages = {stage(StageKind::conv_stem, 2, 16),
                  stage(StageKind::mbconv, 1, 24),
                  stage(StageKind::mbconv, 1, 32),
                  stage(StageKind::transformer, 2, 64),
                  stage(StageKind::transformer, 1, 128)};
    cfg.image_size = 64;
    cfg.max_drop_path = 0.0;
  } else {
    std::string names;
    for (const auto& n : preset_names()) names += n + " ";
    throw ConfigError(detail::cat("unknown preset '", name, "'; valid: ",
                                  names));
  }
  return cfg;
}

std::vector<std::string> ModelConfig::preset_names() {
  return {"metaformer-0", "metaformer-1", "metaformer-2", "tiny"};
}

void ModelConfig::validate() const {
  const StageKind expected[5] = {StageKind::conv_stem, StageKind::mbconv,
                                 StageKind::mbconv, StageKind::transformer,
                                 StageKind::transformer};
  for (int i = 0; i < 5; ++i) {
    if (stages[i].kind != expected[i]) {
      throw ConfigError(detail::cat("stage S", i, " has the wrong kind"));
    }
    if (stages[i].blocks < 1 || stages[i].dim < 1) {
      throw ConfigError(detail::cat("stage S", i, ": L and D must be >= 1"));
    }
  }
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (image_size < 32 || image_size % 32 != 0) {
    throw ConfigError(detail::cat("image_size ", image_size,
                                  " must be a positive multiple of 32"));
  }
  for (int i = 3; i < 5; ++i) {
    if (stages[i].dim % head_dim != 0) {
      throw ConfigError(detail::cat("stage S", i, " dim ", stages[i].dim,
                                    " not divisible by head_dim ", head_dim));
    }
  }
  if (max_drop_path < 0.0 || max_drop_path >= 1.0) {
    throw ConfigError("max_drop_path must lie in [0, 1)");
  }
  meta.validate();
}

std::array<std::int64_t, 5> ModelConfig::spatial_plan() const {
  std::array<std::int64_t, 5> plan{};
  std::int64_t s = image_size;
  for (int i = 0; i < 5; ++i) {
    s /= 2;
    plan[i] = s;
  }
  return plan;
}

std::string ModelConfig::canonical_string() const {
  std::ostringstream os;
  os << "mf1|";
  for (const auto& st : stages) os << st.blocks << ":" << st.dim << ",";
  os << "|classes=" << num_classes << "|image=" << image_size
     << "|mode=" << to_string(mode) << "|head_dim=" << head_dim
     << "|meta=" << meta.describe();
  return os.str();
}

std::uint64_t ModelConfig::hash() const {
  const std::string s = canonical_string();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

AggregateLayer::AggregateLayer(std::int64_t d3, std::int64_t d4, Rng& rng)
    : norm_in(d3), expand(d3, d4, rng), norm_out(d4) {
  fuse_w = Tensor::full({2, d4}, scalar(0.5), true);
  fuse_b = Tensor::zeros({d4}, true);
}

Tensor AggregateLayer::forward(const Tensor& z1, const Tensor& z2) const {
  const std::int64_t d4 = fuse_b.shape()[0];
  Tensor lifted = gelu(expand.forward(norm_in.forward(z1)));  // [B, D4]
  Tensor w1 = reshape(slice(fuse_w, 0, 0, 1), {d4});
  Tensor w2 = reshape(slice(fuse_w, 0, 1, 1), {d4});
  Tensor fused = add(add(mul(lifted, w1), mul(z2, w2)), fuse_b);
  return norm_out.forward(fused);
}

void AggregateLayer::collect(const std::string& prefix, ParamList& out) const {
  norm_in.collect(prefix + ".norm_in", out);
  expand.collect(prefix + ".expand", out);
  out.push_back({prefix + ".fuse_w", fuse_w, false});
  out.push_back({prefix + ".fuse_b", fuse_b, false});
  norm_out.collect(prefix + ".norm_out", out);
}

namespace {

// Stochastic-depth rates ramp linearly over all droppable blocks (S1..S4).
std::vector<double> drop_path_ramp(const ModelConfig& cfg) {
  const std::int64_t n = cfg.stages[1].blocks + cfg.stages[2].blocks +
                         cfg.stages[3].blocks + cfg.stages[4].blocks;
  std::vector<double> rates(static_cast<std::size_t>(n), 0.0);
  if (n > 1 && cfg.max_drop_path > 0.0) {
    for (std::int64_t i = 0; i < n; ++i) {
      rates[i] = cfg.max_drop_path * static_cast<double>(i) /
                 static_cast<double>(n - 1);
    }
  }
  return rates;
}

}  // namespace

MetaFormer::MetaFormer(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);

  const auto& st = config_.stages;
  const std::int64_t d0 = st[0].dim, d1 = st[1].dim, d2 = st[2].dim,
                     d3 = st[3].dim, d4 = st[4].dim;
  const auto plan = config_.spatial_plan();
  const auto ramp = drop_path_ramp(config_);
  std::size_t block_idx = 0;

  stem = ConvStem(3, d0, static_cast<int>(st[0].blocks), rng);
  for (std::int64_t i = 0; i < st[1].blocks; ++i) {
    MBConvSpec spec;
    spec.in_ch = i == 0 ? d0 : d1;
    spec.out_ch = d1;
    spec.stride = i == 0 ? 2 : 1;
    spec.drop_path_rate = ramp[block_idx++];
    s1.emplace_back(spec, rng);
  }
  for (std::int64_t i = 0; i < st[2].blocks; ++i) {
    MBConvSpec spec;
    spec.in_ch = i == 0 ? d1 : d2;
    spec.out_ch = d2;
    spec.stride = 1;  // stage 2 downsamples with max-pool in front
    spec.drop_path_rate = ramp[block_idx++];
    s2.emplace_back(spec, rng);
  }
  embed3 = OverlapPatchEmbed(d2, d3, rng);
  const std::int64_t n_extra = config_.extra_tokens();
  bias3 = RelativeBiasTable(d3 / config_.head_dim, plan[3], n_extra, rng);
  for (std::int64_t i = 0; i < st[3].blocks; ++i) {
    s3.emplace_back(d3, config_.head_dim, ramp[block_idx++], rng);
  }
  embed4 = OverlapPatchEmbed(d3, d4, rng);
  bias4 = RelativeBiasTable(d4 / config_.head_dim, plan[4], n_extra, rng);
  for (std::int64_t i = 0; i < st[4].blocks; ++i) {
    s4.emplace_back(d4, config_.head_dim, ramp[block_idx++], rng);
  }

  if (config_.mode != ClassTokenMode::gap) {
    class_token3 = Tensor::randn({d3}, rng, scalar(0.02), true);
  }
  if (config_.mode == ClassTokenMode::parallel) {
    class_token4 = Tensor::randn({d4}, rng, scalar(0.02), true);
  }
  const bool needs_lift =
      config_.mode == ClassTokenMode::serial || !config_.meta.empty();
  if (needs_lift) extra_lift = Linear(d3, d4, rng);
  if (config_.mode == ClassTokenMode::parallel) {
    aggregate = AggregateLayer(d3, d4, rng);
  } else {
    final_norm = TokenLayerNorm(d4);
  }
  head = Linear(d4, config_.num_classes, rng);
  if (!config_.meta.empty()) {
    meta_encoder = MetaEncoder(config_.meta, d3, rng);
  }
}

Tensor MetaFormer::forward(const Tensor& images, std::span<const MetaRecord> meta,
                           const ForwardContext& ctx) const {
  return forward_full(images, meta, ctx).logits;
}

ForwardArtifacts MetaFormer::forward_full(const Tensor& images,
                                          std::span<const MetaRecord> meta,
                                          const ForwardContext& ctx) const {
  const auto& st = config_.stages;
  if (images.rank() != 4 || images.shape()[1] != 3 ||
      images.shape()[2] != config_.image_size ||
      images.shape()[3] != config_.image_size) {
    throw ShapeError(detail::cat("forward: expected [B,3,", config_.image_size,
                                 ",", config_.image_size, "], got ",
                                 shape_str(images.shape())));
  }
  const std::int64_t batch = images.shape()[0];
  if (config_.meta.empty() && !meta.empty()) {
    throw ContractError("meta records supplied but the model has no meta schema");
  }
  if (!meta.empty() && static_cast<std::int64_t>(meta.size()) != batch) {
    throw ShapeError(detail::cat("forward: ", meta.size(), " meta records for ",
                                 batch, " images"));
  }

  // S0..S2 convolutional path
  Tensor x = stem.forward(images);
  for (const auto& blk : s1) x = blk.forward(x, ctx);
  x = maxpool2x2(x);
  for (const auto& blk : s2) x = blk.forward(x, ctx);

  // S3: tokenize, prepend extras
  const auto plan = config_.spatial_plan();
  const std::int64_t m3 = plan[3], m4 = plan[4];
  const std::int64_t d3 = st[3].dim, d4 = st[4].dim;
  const std::int64_t n_meta = config_.meta.total_tokens();
  const std::int64_t n_extra = config_.extra_tokens();

  Tensor vision3 = embed3.forward(x);  // [B, m3*m3, d3]
  std::vector<Tensor> parts;
  if (config_.mode != ClassTokenMode::gap) {
    parts.push_back(broadcast_to(reshape(class_token3, {1, 1, d3}),
                                 {batch, 1, d3}));
  }
  Tensor meta_tokens;
  if (n_meta > 0) {
    std::vector<MetaRecord> null_records;
    std::span<const MetaRecord> records = meta;
    if (records.empty()) {
      null_records.assign(static_cast<std::size_t>(batch), MetaRecord{});
      records = null_records;
    }
    meta_tokens = meta_encoder.encode(records, ctx);
    parts.push_back(meta_tokens);
  }
  parts.push_back(vision3);
  Tensor seq = parts.size() == 1 ? parts[0] : concat(parts, 1);

  std::vector<Tensor>* sink = ctx.attn_sink;
  for (const auto& blk : s3) seq = blk.forward(seq, bias3, ctx);

  // stage boundary: extras lift linearly, vision re-grids through the embed
  Tensor z1_class;
  std::int64_t cursor = 0;
  if (config_.mode != ClassTokenMode::gap) {
    z1_class = reshape(slice(seq, 1, 0, 1), {batch, d3});
    cursor = 1;
  }
  Tensor meta_out;
  if (n_meta > 0) {
    meta_out = slice(seq, 1, cursor, n_meta);
    cursor += n_meta;
  }
  Tensor vision_grid =
      permute(reshape(slice(seq, 1, cursor, m3 * m3), {batch, m3, m3, d3}),
              {0, 3, 1, 2});  // [B, d3, m3, m3]

  Tensor vision4 = embed4.forward(vision_grid);  // [B, m4*m4, d4]
  parts.clear();
  if (config_.mode == ClassTokenMode::parallel) {
    parts.push_back(broadcast_to(reshape(class_token4, {1, 1, d4}),
                                 {batch, 1, d4}));
  } else if (config_.mode == ClassTokenMode::serial) {
    parts.push_back(reshape(extra_lift.forward(z1_class), {batch, 1, d4}));
  }
  if (n_meta > 0) parts.push_back(extra_lift.forward(meta_out));
  parts.push_back(vision4);
  seq = parts.size() == 1 ? parts[0] : concat(parts, 1);

  for (const auto& blk : s4) seq = blk.forward(seq, bias4, ctx);

  Tensor y;
  switch (config_.mode) {
    case ClassTokenMode::parallel: {
      Tensor z2_class = reshape(slice(seq, 1, 0, 1), {batch, d4});
      y = aggregate.forward(z1_class, z2_class);
      break;
    }
    case ClassTokenMode::serial: {
      y = final_norm.forward(reshape(slice(seq, 1, 0, 1), {batch, d4}));
      break;
    }
    case ClassTokenMode::gap: {
      Tensor normed = final_norm.forward(seq);
      Tensor vision_only = slice(normed, 1, n_meta, m4 * m4);
      y = reduce_mean(vision_only, {1}, false);
      break;
    }
  }

  ForwardArtifacts art;
  art.logits = head.forward(y);
  art.s4_tokens = seq;
  art.s4_grid = m4;
  art.s4_extra = n_extra;
  if (sink) art.attn_probs = *sink;
  return art;
}

ParamList MetaFormer::parameters() const {
  ParamList out;
  stem.collect("stem", out);
  for (std::size_t i = 0; i < s1.size(); ++i)
    s1[i].collect(detail::cat("s1.b", i), out);
  for (std::size_t i = 0; i < s2.size(); ++i)
    s2[i].collect(detail::cat("s2.b", i), out);
  embed3.collect("embed3", out);
  bias3.collect("bias3", out);
  for (std::size_t i = 0; i < s3.size(); ++i)
    s3[i].collect(detail::cat("s3.b", i), out);
  embed4.collect("embed4", out);
  bias4.collect("bias4", out);
  for (std::size_t i = 0; i < s4.size(); ++i)
    s4[i].collect(detail::cat("s4.b", i), out);
  if (class_token3.defined()) out.push_back({"class_token3", class_token3, false});
  if (class_token4.defined()) out.push_back({"class_token4", class_token4, false});
  if (extra_lift.w.defined()) extra_lift.collect("extra_lift", out);
  if (config_.mode == ClassTokenMode::parallel) {
    aggregate.collect("aggregate", out);
  } else {
    final_norm.collect("final_norm", out);
  }
  head.collect("head", out);
  if (!config_.meta.empty()) meta_encoder.collect("meta", out);
  return out;
}

}  // namespace metaformer
