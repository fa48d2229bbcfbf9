#pragma once

#include <cstdint>
#include <vector>

#include "metaformer/tensor.hpp"

namespace metaformer {

// ---- elementwise (numpy-style broadcast on binary ops) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, scalar c);
Tensor neg(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation, see ops.cpp
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---- shape ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& dims);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len);
Tensor broadcast_to(const Tensor& x, Shape shape);

// ---- reductions ----
Tensor reduce_sum(const Tensor& x, std::vector<int> axes, bool keepdims);
Tensor reduce_mean(const Tensor& x, std::vector<int> axes, bool keepdims);
Tensor sum_all(const Tensor& x);  // scalar

// ---- linear algebra ----
// Batched matrix product; leading dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] * w[in, out] + b[out]; the dense-layer workhorse.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// table[V, D] -> out[ids.size(), D]
Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& ids);
// table[H, L], index_map of t*t entries -> out[H, t, t]
Tensor gather_bias(const Tensor& table, const std::vector<std::int32_t>& index_map,
                   std::int64_t t);

// ---- neural net ops ----
Tensor softmax(const Tensor& x, int axis);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 scalar eps);
// Per-position layer norm across the channel axis of an NCHW map; params
// are per channel. Equivalent to permuting channels last, normalizing, and
// permuting back, without the copies.
Tensor layernorm_channels(const Tensor& x, const Tensor& gamma,
                          const Tensor& beta, scalar eps);
// x[B,Cin,H,W], w[Cout,Cin/groups,kh,kw], optional bias[Cout].
// Cross-correlation; out spatial = floor((in + 2*pad - k)/stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad, int groups);
Tensor maxpool2x2(const Tensor& x);

// logits[b,h,i,j] = scale * <q[b,h,i,:], k[b,h,j,:]> + bias[h,i,j]
Tensor attention_scores(const Tensor& q, const Tensor& k, scalar scale,
                        const Tensor& bias);
// out[b,h,i,:] = sum_j p[b,h,i,j] * v[b,h,j,:], order-invariant accumulation
Tensor attention_apply(const Tensor& p, const Tensor& v);

// Mean over the batch of -log p(label), with optional label smoothing.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels,
                     scalar smoothing);

}  // namespace metaformer
