#pragma once

#include <string>
#include <vector>

#include "metaformer/ops.hpp"
#include "metaformer/rng.hpp"
#include "metaformer/tensor.hpp"

namespace metaformer {

// Named reference to a learnable tensor. `decay` marks weight-decay
// eligibility (matrix-shaped weights yes; biases, norms, tokens, tables no).
struct ParamRef {
  std::string name;
  Tensor tensor;
  bool decay = true;
};
using ParamList = std::vector<ParamRef>;

// Per-forward options threaded through every block.
struct ForwardContext {
  bool training = false;
  double mask_ratio = 0.0;  // meta-token replacement probability
  Rng* rng = nullptr;       // required for any stochastic training behavior
  // When set, every attention layer appends its softmax probabilities
  // [B, heads, T, T]; used by the similarity/attention exports.
  std::vector<Tensor>* attn_sink = nullptr;
};

// Sample-wise stochastic depth: drops the whole residual branch per sample
// with probability `rate`, rescaling survivors by 1/(1-rate) at train time.
// Identity in eval mode. A rate >= 1 drops the branch outright.
Tensor drop_path(const Tensor& branch, double rate, const ForwardContext& ctx);

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out], undefined when bias-free
  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, Rng& rng, bool bias = true,
         scalar init_std = scalar(0.02));
  Tensor forward(const Tensor& x) const { return linear(x, w, b); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Conv2dLayer {
  Tensor w;  // [out, in/groups, k, k]
  Tensor b;  // optional
  int stride = 1, pad = 0, groups = 1;
  Conv2dLayer() = default;
  Conv2dLayer(std::int64_t in, std::int64_t out, int kernel, int stride,
              int pad, int groups, bool bias, Rng& rng);
  Tensor forward(const Tensor& x) const {
    return conv2d(x, w, b, stride, pad, groups);
  }
  void collect(const std::string& prefix, ParamList& out) const;
};

// LayerNorm over the trailing feature axis of token tensors [..., D].
struct TokenLayerNorm {
  Tensor gamma, beta;
  scalar eps = scalar(1e-5);
  TokenLayerNorm() = default;
  explicit TokenLayerNorm(std::int64_t dim);
  Tensor forward(const Tensor& x) const {
    return layernorm(x, gamma, beta, eps);
  }
  void collect(const std::string& prefix, ParamList& out) const;
};

// Per-position normalization across channels of an NCHW map. Batch-size
// independent, so tiny desk-scale batches behave the same as large ones.
struct ChannelLayerNorm {
  Tensor gamma, beta;
  scalar eps = scalar(1e-5);
  ChannelLayerNorm() = default;
  explicit ChannelLayerNorm(std::int64_t channels);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Stage S0: `layers` 3x3 convs, the first with stride 2; all but the last
// run at half width. conv -> norm -> gelu each.
struct ConvStem {
  std::vector<Conv2dLayer> convs;
  std::vector<ChannelLayerNorm> norms;
  ConvStem() = default;
  ConvStem(std::int64_t in_ch, std::int64_t out_ch, int layers, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct SqueezeExcite {
  Linear fc1, fc2;
  SqueezeExcite() = default;
  SqueezeExcite(std::int64_t channels, std::int64_t hidden, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct MBConvSpec {
  std::int64_t in_ch = 0, out_ch = 0;
  int stride = 1;
  int expansion = 4;         // fixed inverted-bottleneck ratio
  double se_ratio = 0.25;    // SE hidden = in_ch * se_ratio
  double drop_path_rate = 0.0;
};

// expand 1x1 -> dw 3x3 (stride here) -> SE -> project 1x1, channel-norm
// after each conv, silu activations, linear projection. Residual only at
// stride 1 with matching channels.
struct MBConv {
  MBConvSpec spec;
  Conv2dLayer expand, dw, project;
  ChannelLayerNorm n1, n2, n3;
  SqueezeExcite se;
  MBConv() = default;
  MBConv(const MBConvSpec& spec, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Pre-LN transformer MLP: LN -> 4x linear -> gelu -> linear, residual add.
struct MlpBlock {
  TokenLayerNorm norm;
  Linear fc1, fc2;
  MlpBlock() = default;
  MlpBlock(std::int64_t dim, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardContext& ctx,
                 double drop_path_rate = 0.0) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace metaformer
