#include "metaformer/nn.hpp"

#include <cmath>

namespace metaformer {

Tensor drop_path(const Tensor& branch, double rate, const ForwardContext& ctx) {
  if (!ctx.training || rate <= 0.0) return branch;
  if (!ctx.rng) {
    throw ContractError("drop_path: training forward needs an rng");
  }
  const std::int64_t batch = branch.shape()[0];
  Shape mask_shape(branch.rank(), 1);
  mask_shape[0] = batch;
  Tensor mask(std::move(mask_shape));
  auto md = mask.mutable_data();
  if (rate >= 1.0) {
    // full drop, no survivor rescaling possible
    return mul(branch, mask);
  }
  const scalar keep_scale = static_cast<scalar>(1.0 / (1.0 - rate));
  for (std::int64_t i = 0; i < batch; ++i) {
    md[i] = ctx.rng->bernoulli(rate) ? scalar(0) : keep_scale;
  }
  return mul(branch, mask);
}

Linear::Linear(std::int64_t in, std::int64_t out, Rng& rng, bool bias,
               scalar init_std) {
  w = Tensor::randn({in, out}, rng, init_std, true);
  if (bias) b = Tensor::zeros({out}, true);
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".w", w, true});
  if (b.defined()) out.push_back({prefix + ".b", b, false});
}

Conv2dLayer::Conv2dLayer(std::int64_t in, std::int64_t out, int kernel,
                         int stride_, int pad_, int groups_, bool bias,
                         Rng& rng)
    : stride(stride_), pad(pad_), groups(groups_) {
  const std::int64_t fan_in = (in / groups_) * kernel * kernel;
  const scalar stddev =
      static_cast<scalar>(std::sqrt(2.0 / static_cast<double>(fan_in)));
  w = Tensor::randn({out, in / groups_, kernel, kernel}, rng, stddev, true);
  if (bias) b = Tensor::zeros({out}, true);
}

void Conv2dLayer::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".w", w, true});
  if (b.defined()) out.push_back({prefix + ".b", b, false});
}

TokenLayerNorm::TokenLayerNorm(std::int64_t dim)
    : gamma(Tensor::ones({dim}, true)), beta(Tensor::zeros({dim}, true)) {}

void TokenLayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma, false});
  out.push_back({prefix + ".beta", beta, false});
}

ChannelLayerNorm::ChannelLayerNorm(std::int64_t channels)
    : gamma(Tensor::ones({channels}, true)),
      beta(Tensor::zeros({channels}, true)) {}

Tensor ChannelLayerNorm::forward(const Tensor& x) const {
  return layernorm_channels(x, gamma, beta, eps);
}

void ChannelLayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma, false});
  out.push_back({prefix + ".beta", beta, false});
}

ConvStem::ConvStem(std::int64_t in_ch, std::int64_t out_ch, int layers,
                   Rng& rng) {
  if (layers < 1) throw ConfigError("ConvStem: needs at least one layer");
  const std::int64_t mid = std::max<std::int64_t>(out_ch / 2, 1);
  std::int64_t prev = in_ch;
  for (int i = 0; i < layers; ++i) {
    const std::int64_t ch = (i == layers - 1) ? out_ch : mid;
    convs.emplace_back(prev, ch, 3, i == 0 ? 2 : 1, 1, 1, false, rng);
    norms.emplace_back(ch);
    prev = ch;
  }
}

Tensor ConvStem::forward(const Tensor& x) const {
  if (x.rank() != 4) throw ShapeError("ConvStem: input must be [B,C,H,W]");
  if (x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0) {
    throw ShapeError(detail::cat("ConvStem: spatial dims must be even, got ",
                                 shape_str(x.shape())));
  }
  Tensor h = x;
  for (std::size_t i = 0; i < convs.size(); ++i) {
    h = gelu(norms[i].forward(convs[i].forward(h)));
  }
  return h;
}

void ConvStem::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < convs.size(); ++i) {
    convs[i].collect(detail::cat(prefix, ".conv", i), out);
    norms[i].collect(detail::cat(prefix, ".norm", i), out);
  }
}

SqueezeExcite::SqueezeExcite(std::int64_t channels, std::int64_t hidden,
                             Rng& rng)
    : fc1(channels, hidden, rng), fc2(hidden, channels, rng) {}

Tensor SqueezeExcite::forward(const Tensor& x) const {
  const std::int64_t c = x.shape()[1];
  Tensor pooled = reduce_mean(x, {2, 3}, false);  // [B, C]
  Tensor gate = sigmoid(fc2.forward(silu(fc1.forward(pooled))));
  return mul(x, reshape(gate, {x.shape()[0], c, 1, 1}));
}

void SqueezeExcite::collect(const std::string& prefix, ParamList& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

MBConv::MBConv(const MBConvSpec& s, Rng& rng) : spec(s) {
  if (spec.se_ratio <= 0.0 || spec.se_ratio > 1.0) {
    throw ConfigError(detail::cat("MBConv: se_ratio ", spec.se_ratio,
                                  " outside (0, 1]"));
  }
  if (spec.stride != 1 && spec.stride != 2) {
    throw ConfigError("MBConv: stride must be 1 or 2");
  }
  const std::int64_t mid = spec.in_ch * spec.expansion;
  const std::int64_t se_hidden = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(
             std::lround(static_cast<double>(spec.in_ch) * spec.se_ratio)));
  expand = Conv2dLayer(spec.in_ch, mid, 1, 1, 0, 1, false, rng);
  n1 = ChannelLayerNorm(mid);
  dw = Conv2dLayer(mid, mid, 3, spec.stride, 1, static_cast<int>(mid), false,
                   rng);
  n2 = ChannelLayerNorm(mid);
  se = SqueezeExcite(mid, se_hidden, rng);
  project = Conv2dLayer(mid, spec.out_ch, 1, 1, 0, 1, false, rng);
  n3 = ChannelLayerNorm(spec.out_ch);
}

Tensor MBConv::forward(const Tensor& x, const ForwardContext& ctx) const {
  if (x.shape()[1] != spec.in_ch) {
    throw ShapeError(detail::cat("MBConv: expected ", spec.in_ch,
                                 " channels, got ", shape_str(x.shape())));
  }
  Tensor h = silu(n1.forward(expand.forward(x)));
  h = silu(n2.forward(dw.forward(h)));
  h = se.forward(h);
  h = n3.forward(project.forward(h));
  if (spec.stride == 1 && spec.in_ch == spec.out_ch) {
    return add(x, drop_path(h, spec.drop_path_rate, ctx));
  }
  return h;
}

void MBConv::collect(const std::string& prefix, ParamList& out) const {
  expand.collect(prefix + ".expand", out);
  n1.collect(prefix + ".n1", out);
  dw.collect(prefix + ".dw", out);
  n2.collect(prefix + ".n2", out);
  se.collect(prefix + ".se", out);
  project.collect(prefix + ".project", out);
  n3.collect(prefix + ".n3", out);
}

MlpBlock::MlpBlock(std::int64_t dim, Rng& rng)
    : norm(dim), fc1(dim, 4 * dim, rng), fc2(4 * dim, dim, rng) {}

Tensor MlpBlock::forward(const Tensor& x, const ForwardContext& ctx,
                         double drop_path_rate) const {
  if (x.shape().back() != fc1.w.shape()[0]) {
    throw ShapeError(detail::cat("MlpBlock: dim ", fc1.w.shape()[0],
                                 " expected, got ", shape_str(x.shape())));
  }
  Tensor h = fc2.forward(gelu(fc1.forward(norm.forward(x))));
  return add(x, drop_path(h, drop_path_rate, ctx));
}

void MlpBlock::collect(const std::string& prefix, ParamList& out) const {
  norm.collect(prefix + ".norm", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

}  // namespace metaformer
