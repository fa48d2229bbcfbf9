#include "metaformer/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace metaformer {

namespace {

using Mat = Eigen::Matrix<scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<Mat>;
using MapC = Eigen::Map<const Mat>;

using detail::make_op_output;
using detail::TensorImpl;

// ---------------------------------------------------------------------------
// broadcast helpers

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(detail::cat(op, ": shapes ", shape_str(a), " and ",
                                   shape_str(b), " are not broadcastable"));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Element strides for iterating `shape` as if broadcast to `out`; zero on
// broadcast axes.
std::vector<std::int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t s = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const std::size_t ri = shape.size() - 1 - i;
    const std::size_t ro = out.size() - 1 - i;
    strides[ro] = (shape[ri] == 1 && out[ro] != 1) ? 0 : s;
    s *= shape[ri];
  }
  return strides;
}

template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, F&& f) {
  const std::size_t rank = out.size();
  const std::int64_t n = numel_of(out);
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Sum `g` (laid out as `from`) down to shape `to` (which broadcasts to
// `from`); used by binary-op backward passes.
void reduce_into(const scalar* g, const Shape& from, scalar* acc, const Shape& to) {
  const auto st = broadcast_strides(to, from);
  const std::vector<std::int64_t> zero(from.size(), 0);
  for_each_broadcast(from, st, zero,
                     [&](std::int64_t i, std::int64_t oa, std::int64_t) {
                       acc[oa] += g[i];
                     });
}

// Detects the two broadcast layouts the model actually hits in bulk:
// "rows": b (with trailing 1s stripped) equals the leading dims of out, so
// one b value scales a contiguous inner block. "cols": b equals the
// trailing dims, repeating across outer blocks.
enum class BcastKind { generic, rows, cols };

BcastKind classify_broadcast(const Shape& out, const Shape& b,
                             std::int64_t& outer, std::int64_t& inner) {
  Shape stripped = b;
  while (!stripped.empty() && stripped.back() == 1) stripped.pop_back();
  if (stripped.size() <= out.size()) {
    bool rows = true;
    for (std::size_t i = 0; i < stripped.size(); ++i) {
      if (stripped[i] != out[i]) rows = false;
    }
    if (rows) {
      outer = numel_of(stripped);
      inner = numel_of(out) / std::max<std::int64_t>(outer, 1);
      return BcastKind::rows;
    }
  }
  Shape lead = b;
  std::size_t skip = 0;
  while (skip < lead.size() && lead[skip] == 1) ++skip;
  lead.erase(lead.begin(), lead.begin() + skip);
  if (lead.size() <= out.size()) {
    bool cols = true;
    for (std::size_t i = 0; i < lead.size(); ++i) {
      if (lead[i] != out[out.size() - lead.size() + i]) cols = false;
    }
    if (cols) {
      inner = numel_of(lead);
      outer = numel_of(out) / std::max<std::int64_t>(inner, 1);
      return BcastKind::cols;
    }
  }
  outer = inner = 0;
  return BcastKind::generic;
}

template <typename FwdF, typename BwdA, typename BwdB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, FwdF f,
                 BwdA dfa, BwdB dfb) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) {
    const std::int64_t n = a.numel();
    Buffer out(static_cast<std::size_t>(n));
    const scalar* pa = a.data().data();
    const scalar* pb = b.data().data();
    for (std::int64_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[i]);
    return make_op_output(
        sa, std::move(out), name, {a, b},
        [a, b, dfa, dfb](const TensorImpl& o) {
          const std::int64_t n = o.numel();
          const scalar* g = o.grad.data();
          const scalar* pa = a.data().data();
          const scalar* pb = b.data().data();
          if (a.impl()->requires_grad) {
            a.impl()->ensure_grad();
            scalar* ga = a.impl()->grad.data();
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * dfa(pa[i], pb[i]);
          }
          if (b.impl()->requires_grad) {
            b.impl()->ensure_grad();
            scalar* gb = b.impl()->grad.data();
            for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * dfb(pa[i], pb[i]);
          }
        });
  }

  Shape so = broadcast_shape(sa, sb, name);
  if (so == sa) {
    std::int64_t outer = 0, inner = 0;
    const BcastKind kind = classify_broadcast(so, sb, outer, inner);
    if (kind != BcastKind::generic) {
      const scalar* pa = a.data().data();
      const scalar* pb = b.data().data();
      Buffer out(static_cast<std::size_t>(outer * inner));
      if (kind == BcastKind::rows) {
        for (std::int64_t o = 0; o < outer; ++o) {
          const scalar bv = pb[o];
          scalar* dst = out.data() + o * inner;
          const scalar* src = pa + o * inner;
          for (std::int64_t i = 0; i < inner; ++i) dst[i] = f(src[i], bv);
        }
      } else {
        for (std::int64_t o = 0; o < outer; ++o) {
          scalar* dst = out.data() + o * inner;
          const scalar* src = pa + o * inner;
          for (std::int64_t i = 0; i < inner; ++i) dst[i] = f(src[i], pb[i]);
        }
      }
      return make_op_output(
          so, std::move(out), name, {a, b},
          [a, b, kind, outer, inner, dfa, dfb](const TensorImpl& o) {
            const scalar* g = o.grad.data();
            const scalar* pa = a.data().data();
            const scalar* pb = b.data().data();
            const bool need_a = a.impl()->requires_grad;
            const bool need_b = b.impl()->requires_grad;
            if (need_a) a.impl()->ensure_grad();
            if (need_b) b.impl()->ensure_grad();
            scalar* ga = need_a ? a.impl()->grad.data() : nullptr;
            scalar* gb = need_b ? b.impl()->grad.data() : nullptr;
            if (kind == BcastKind::rows) {
              for (std::int64_t ot = 0; ot < outer; ++ot) {
                const scalar bv = pb[ot];
                const scalar* src = pa + ot * inner;
                const scalar* gr = g + ot * inner;
                if (ga) {
                  scalar* dst = ga + ot * inner;
                  for (std::int64_t i = 0; i < inner; ++i)
                    dst[i] += gr[i] * dfa(src[i], bv);
                }
                if (gb) {
                  scalar acc = 0;
                  for (std::int64_t i = 0; i < inner; ++i)
                    acc += gr[i] * dfb(src[i], bv);
                  gb[ot] += acc;
                }
              }
            } else {
              for (std::int64_t ot = 0; ot < outer; ++ot) {
                const scalar* src = pa + ot * inner;
                const scalar* gr = g + ot * inner;
                if (ga) {
                  scalar* dst = ga + ot * inner;
                  for (std::int64_t i = 0; i < inner; ++i)
                    dst[i] += gr[i] * dfa(src[i], pb[i]);
                }
                if (gb) {
                  for (std::int64_t i = 0; i < inner; ++i)
                    gb[i] += gr[i] * dfb(src[i], pb[i]);
                }
              }
            }
          });
    }
  }
  const auto stra = broadcast_strides(sa, so);
  const auto strb = broadcast_strides(sb, so);
  Buffer out(static_cast<std::size_t>(numel_of(so)));
  const scalar* pa = a.data().data();
  const scalar* pb = b.data().data();
  for_each_broadcast(so, stra, strb,
                     [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
                       out[i] = f(pa[oa], pb[ob]);
                     });
  return make_op_output(
      so, std::move(out), name, {a, b},
      [a, b, so, stra, strb, dfa, dfb](const TensorImpl& o) {
        const scalar* g = o.grad.data();
        const scalar* pa = a.data().data();
        const scalar* pb = b.data().data();
        if (a.impl()->requires_grad) {
          a.impl()->ensure_grad();
          scalar* ga = a.impl()->grad.data();
          const auto sta = broadcast_strides(a.shape(), so);
          for_each_broadcast(so, sta, strb,
                             [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
                               ga[oa] += g[i] * dfa(pa[oa], pb[ob]);
                             });
        }
        if (b.impl()->requires_grad) {
          b.impl()->ensure_grad();
          scalar* gb = b.impl()->grad.data();
          const auto sta2 = broadcast_strides(a.shape(), so);
          const auto stb = broadcast_strides(b.shape(), so);
          for_each_broadcast(so, sta2, stb,
                             [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
                               gb[ob] += g[i] * dfb(pa[oa], pb[ob]);
                             });
        }
      });
}

template <typename FwdF, typename BwdF>
Tensor unary_op(const Tensor& x, const char* name, FwdF f, BwdF df) {
  const std::int64_t n = x.numel();
  Buffer out(static_cast<std::size_t>(n));
  const scalar* px = x.data().data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = f(px[i]);
  return make_op_output(x.shape(), std::move(out), name, {x},
                        [x, df](const TensorImpl& o) {
                          if (!x.impl()->requires_grad) return;
                          x.impl()->ensure_grad();
                          const std::int64_t n = o.numel();
                          const scalar* g = o.grad.data();
                          const scalar* px = x.data().data();
                          const scalar* py = o.data.data();
                          scalar* gx = x.impl()->grad.data();
                          for (std::int64_t i = 0; i < n; ++i)
                            gx[i] += g[i] * df(px[i], py[i]);
                        });
}

// ---------------------------------------------------------------------------
// order-invariant accumulation
//
// Fixed-point summation in 128-bit integers: each term is rounded to a grid
// once (order-free), integer addition is exact, so the result is independent
// of summand ordering. Attention rows stay bit-identical under the token
// permutations its bias structure makes symmetric.

inline double invariant_unit_sum(const double* terms, std::int64_t n) {
  // terms must lie in [0, 1]; scaling to < 2^62 keeps the per-term
  // conversion a single instruction while the 128-bit total stays exact
  unsigned __int128 acc = 0;
  for (std::int64_t j = 0; j < n; ++j) {
    acc += static_cast<unsigned long long>(terms[j] * 0x1p62);
  }
  return std::ldexp(static_cast<double>(acc), -62);
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](scalar x, scalar y) { return x + y; },
      [](scalar, scalar) { return scalar(1); },
      [](scalar, scalar) { return scalar(1); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](scalar x, scalar y) { return x - y; },
      [](scalar, scalar) { return scalar(1); },
      [](scalar, scalar) { return scalar(-1); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](scalar x, scalar y) { return x * y; },
      [](scalar, scalar y) { return y; }, [](scalar x, scalar) { return x; });
}

Tensor scale(const Tensor& x, scalar c) {
  return unary_op(
      x, "scale", [c](scalar v) { return v * c; },
      [c](scalar, scalar) { return c; });
}

Tensor neg(const Tensor& x) { return scale(x, scalar(-1)); }

namespace {

using ArrMap = Eigen::Map<Eigen::Array<scalar, Eigen::Dynamic, 1>>;
using ArrMapC = Eigen::Map<const Eigen::Array<scalar, Eigen::Dynamic, 1>>;

// activation forwards/backwards as array expressions; the packet math for
// exp/tanh is several times faster than per-element libm calls
template <typename FwdExpr, typename BwdExpr>
Tensor activation_op(const Tensor& x, const char* name, FwdExpr fwd,
                     BwdExpr dfx) {
  const std::int64_t n = x.numel();
  Buffer out(static_cast<std::size_t>(n));
  fwd(ArrMapC(x.data().data(), n), ArrMap(out.data(), n));
  return make_op_output(x.shape(), std::move(out), name, {x},
                        [x, dfx](const TensorImpl& o) {
                          if (!x.impl()->requires_grad) return;
                          x.impl()->ensure_grad();
                          const std::int64_t n = o.numel();
                          Buffer d(static_cast<std::size_t>(n));
                          dfx(ArrMapC(x.data().data(), n),
                              ArrMapC(o.data.data(), n), ArrMap(d.data(), n));
                          scalar* gx = x.impl()->grad.data();
                          const scalar* g = o.grad.data();
                          for (std::int64_t i = 0; i < n; ++i)
                            gx[i] += g[i] * d[i];
                        });
}

}  // namespace

// gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
// The tanh form is the only one used in this codebase.
Tensor gelu(const Tensor& x) {
  constexpr scalar kC = static_cast<scalar>(0.7978845608028654);  // sqrt(2/pi)
  constexpr scalar kA = static_cast<scalar>(0.044715);
  using Arr = Eigen::Array<scalar, Eigen::Dynamic, 1>;
  return activation_op(
      x, "gelu",
      [=](auto xin, auto y) {
        y = scalar(0.5) * xin *
            (scalar(1) + (kC * (xin + kA * xin.cube())).tanh());
      },
      [=](auto xin, auto, auto d) {
        const Arr t = (kC * (xin + kA * xin.cube())).tanh();
        d = scalar(0.5) * (scalar(1) + t) +
            scalar(0.5) * xin * (scalar(1) - t.square()) * kC *
                (scalar(1) + scalar(3) * kA * xin.square());
      });
}

Tensor silu(const Tensor& x) {
  using Arr = Eigen::Array<scalar, Eigen::Dynamic, 1>;
  return activation_op(
      x, "silu",
      [](auto xin, auto y) { y = xin / (scalar(1) + (-xin).exp()); },
      [](auto xin, auto, auto d) {
        const Arr s = scalar(1) / (scalar(1) + (-xin).exp());
        d = s * (scalar(1) + xin * (scalar(1) - s));
      });
}

Tensor sigmoid(const Tensor& x) {
  return activation_op(
      x, "sigmoid",
      [](auto xin, auto y) { y = scalar(1) / (scalar(1) + (-xin).exp()); },
      [](auto, auto y, auto d) { d = y * (scalar(1) - y); });
}

// ---------------------------------------------------------------------------
// shape ops

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError(detail::cat("reshape: ", shape_str(x.shape()), " -> ",
                                 shape_str(shape), " changes element count"));
  }
  Buffer out(x.data().begin(), x.data().end());
  return make_op_output(std::move(shape), std::move(out), "reshape", {x},
                        [x](const TensorImpl& o) {
                          if (!x.impl()->requires_grad) return;
                          x.impl()->ensure_grad();
                          scalar* gx = x.impl()->grad.data();
                          const scalar* g = o.grad.data();
                          for (std::int64_t i = 0; i < o.numel(); ++i) gx[i] += g[i];
                        });
}

namespace {

void permute_copy(const scalar* src, const Shape& sshape, scalar* dst,
                  const std::vector<int>& dims) {
  const std::size_t rank = sshape.size();
  Shape oshape(rank);
  for (std::size_t i = 0; i < rank; ++i) oshape[i] = sshape[dims[i]];
  std::vector<std::int64_t> sstride(rank, 1);
  for (std::size_t i = rank - 1; i > 0; --i)
    sstride[i - 1] = sstride[i] * sshape[i];
  std::vector<std::int64_t> ostride_in_src(rank);
  for (std::size_t i = 0; i < rank; ++i) ostride_in_src[i] = sstride[dims[i]];

  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t soff = 0;
  const std::int64_t n = numel_of(oshape);
  for (std::int64_t i = 0; i < n; ++i) {
    dst[i] = src[soff];
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      soff += ostride_in_src[d];
      if (idx[d] < oshape[d]) break;
      soff -= ostride_in_src[d] * oshape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& dims) {
  const std::size_t rank = x.rank();
  if (dims.size() != rank) {
    throw ShapeError(detail::cat("permute: got ", dims.size(), " dims for rank ",
                                 rank));
  }
  std::vector<bool> seen(rank, false);
  for (int d : dims) {
    if (d < 0 || static_cast<std::size_t>(d) >= rank || seen[d]) {
      throw ShapeError("permute: dims must be a permutation of the axes");
    }
    seen[d] = true;
  }
  Shape oshape(rank);
  for (std::size_t i = 0; i < rank; ++i) oshape[i] = x.shape()[dims[i]];
  Buffer out(static_cast<std::size_t>(x.numel()));
  permute_copy(x.data().data(), x.shape(), out.data(), dims);

  std::vector<int> inverse(rank);
  for (std::size_t i = 0; i < rank; ++i) inverse[dims[i]] = static_cast<int>(i);
  return make_op_output(std::move(oshape), std::move(out), "permute", {x},
                        [x, inverse](const TensorImpl& o) {
                          if (!x.impl()->requires_grad) return;
                          x.impl()->ensure_grad();
                          std::vector<scalar> tmp(o.grad.size());
                          permute_copy(o.grad.data(), o.shape, tmp.data(), inverse);
                          scalar* gx = x.impl()->grad.data();
                          for (std::size_t i = 0; i < tmp.size(); ++i)
                            gx[i] += tmp[i];
                        });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const std::size_t rank = first.size();
  if (axis < 0 || static_cast<std::size_t>(axis) >= rank) {
    throw ShapeError("concat: axis out of range");
  }
  Shape oshape = first;
  oshape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < rank; ++d) {
      if (d != static_cast<std::size_t>(axis) && p.shape()[d] != first[d]) {
        throw ShapeError(detail::cat("concat: shape mismatch ",
                                     shape_str(p.shape()), " vs ",
                                     shape_str(first)));
      }
    }
    oshape[axis] += p.shape()[axis];
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < rank; ++d) inner *= first[d];

  Buffer out(static_cast<std::size_t>(numel_of(oshape)));
  const std::int64_t orow = oshape[axis] * inner;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t prow = p.shape()[axis] * inner;
    const scalar* src = p.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + o * orow + off, src + o * prow,
                  sizeof(scalar) * static_cast<std::size_t>(prow));
    }
    off += prow;
  }
  return make_op_output(
      std::move(oshape), std::move(out), "concat", parts,
      [parts, axis, outer, inner](const TensorImpl& o) {
        const std::int64_t orow = o.shape[axis] * inner;
        std::int64_t off = 0;
        for (const auto& p : parts) {
          const std::int64_t prow = p.shape()[axis] * inner;
          if (p.impl()->requires_grad) {
            p.impl()->ensure_grad();
            scalar* gp = p.impl()->grad.data();
            const scalar* g = o.grad.data();
            for (std::int64_t ot = 0; ot < outer; ++ot)
              for (std::int64_t i = 0; i < prow; ++i)
                gp[ot * prow + i] += g[ot * orow + off + i];
          }
          off += prow;
        }
      });
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len) {
  const Shape& s = x.shape();
  if (axis < 0 || static_cast<std::size_t>(axis) >= s.size()) {
    throw ShapeError("slice: axis out of range");
  }
  if (start < 0 || len < 0 || start + len > s[axis]) {
    throw ShapeError(detail::cat("slice: range [", start, ",", start + len,
                                 ") out of bounds for dim ", s[axis]));
  }
  Shape oshape = s;
  oshape[axis] = len;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::int64_t xrow = s[axis] * inner;
  const std::int64_t orow = len * inner;
  Buffer out(static_cast<std::size_t>(outer * orow));
  const scalar* src = x.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * orow, src + o * xrow + start * inner,
                sizeof(scalar) * static_cast<std::size_t>(orow));
  }
  return make_op_output(std::move(oshape), std::move(out), "slice", {x},
                        [x, outer, inner, xrow, orow, start](const TensorImpl& o) {
                          if (!x.impl()->requires_grad) return;
                          x.impl()->ensure_grad();
                          scalar* gx = x.impl()->grad.data();
                          const scalar* g = o.grad.data();
                          for (std::int64_t ot = 0; ot < outer; ++ot)
                            for (std::int64_t i = 0; i < orow; ++i)
                              gx[ot * xrow + start * inner + i] += g[ot * orow + i];
                        });
}

Tensor broadcast_to(const Tensor& x, Shape shape) {
  // validity check via broadcast_shape; x must broadcast to exactly `shape`
  Shape check = broadcast_shape(x.shape(), shape, "broadcast_to");
  if (check != shape) {
    throw ShapeError(detail::cat("broadcast_to: ", shape_str(x.shape()),
                                 " does not broadcast to ", shape_str(shape)));
  }
  {
    // suffix-repeat fast path (class token / null embedding expansion)
    std::int64_t outer = 0, inner = 0;
    if (classify_broadcast(shape, x.shape(), outer, inner) ==
        BcastKind::cols) {
      Buffer out(static_cast<std::size_t>(outer * inner));
      const scalar* px = x.data().data();
      for (std::int64_t o = 0; o < outer; ++o) {
        std::memcpy(out.data() + o * inner, px,
                    sizeof(scalar) * static_cast<std::size_t>(inner));
      }
      return make_op_output(std::move(shape), std::move(out), "broadcast_to",
                            {x}, [x, outer, inner](const TensorImpl& o) {
                              if (!x.impl()->requires_grad) return;
                              x.impl()->ensure_grad();
                              scalar* gx = x.impl()->grad.data();
                              const scalar* g = o.grad.data();
                              for (std::int64_t ot = 0; ot < outer; ++ot) {
                                const scalar* src = g + ot * inner;
                                for (std::int64_t i = 0; i < inner; ++i)
                                  gx[i] += src[i];
                              }
                            });
    }
  }
  const auto st = broadcast_strides(x.shape(), shape);
  const std::vector<std::int64_t> zero(shape.size(), 0);
  Buffer out(static_cast<std::size_t>(numel_of(shape)));
  const scalar* px = x.data().data();
  for_each_broadcast(shape, st, zero,
                     [&](std::int64_t i, std::int64_t oa, std::int64_t) {
                       out[i] = px[oa];
                     });
  Shape xshape = x.shape();
  return make_op_output(std::move(shape), std::move(out), "broadcast_to", {x},
                        [x, xshape](const TensorImpl& o) {
                          if (!x.impl()->requires_grad) return;
                          x.impl()->ensure_grad();
                          reduce_into(o.grad.data(), o.shape,
                                      x.impl()->grad.data(), xshape);
                        });
}

// ---------------------------------------------------------------------------
// reductions

namespace {

std::vector<int> normalize_axes(std::vector<int> axes, std::size_t rank) {
  for (auto& a : axes) {
    if (a < 0) a += static_cast<int>(rank);
    if (a < 0 || static_cast<std::size_t>(a) >= rank) {
      throw ShapeError("reduce: axis out of range");
    }
  }
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  return axes;
}

}  // namespace

Tensor reduce_sum(const Tensor& x, std::vector<int> axes, bool keepdims) {
  const Shape& s = x.shape();
  axes = normalize_axes(std::move(axes), s.size());
  Shape kept = s;  // with reduced dims set to 1
  for (int a : axes) kept[a] = 1;

  // every reduction in the model spans a contiguous axis range, so the
  // (outer, len, inner) decomposition applies
  const bool contiguous =
      !axes.empty() && axes.back() - axes.front() ==
                           static_cast<int>(axes.size()) - 1;
  Buffer out(static_cast<std::size_t>(numel_of(kept)), scalar(0));
  const scalar* px = x.data().data();
  std::int64_t outer = 1, len = 1, inner = 1;
  if (contiguous) {
    for (int d = 0; d < axes.front(); ++d) outer *= s[d];
    for (int d = axes.front(); d <= axes.back(); ++d) len *= s[d];
    for (std::size_t d = axes.back() + 1; d < s.size(); ++d) inner *= s[d];
    for (std::int64_t o = 0; o < outer; ++o) {
      scalar* dst = out.data() + o * inner;
      for (std::int64_t l = 0; l < len; ++l) {
        const scalar* src = px + (o * len + l) * inner;
        for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  } else {
    const auto st = broadcast_strides(kept, s);
    const std::vector<std::int64_t> zero(s.size(), 0);
    for_each_broadcast(s, st, zero,
                       [&](std::int64_t i, std::int64_t oa, std::int64_t) {
                         out[oa] += px[i];
                       });
  }

  Shape oshape;
  if (keepdims) {
    oshape = kept;
  } else {
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (!std::binary_search(axes.begin(), axes.end(), static_cast<int>(d))) {
        oshape.push_back(s[d]);
      }
    }
  }
  Shape xshape = s;
  return make_op_output(
      std::move(oshape), std::move(out), "reduce_sum", {x},
      [x, kept, xshape, contiguous, outer, len, inner](const TensorImpl& o) {
        if (!x.impl()->requires_grad) return;
        x.impl()->ensure_grad();
        scalar* gx = x.impl()->grad.data();
        const scalar* g = o.grad.data();
        if (contiguous) {
          for (std::int64_t ot = 0; ot < outer; ++ot) {
            const scalar* src = g + ot * inner;
            for (std::int64_t l = 0; l < len; ++l) {
              scalar* dst = gx + (ot * len + l) * inner;
              for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
          }
          return;
        }
        const auto st = broadcast_strides(kept, xshape);
        const std::vector<std::int64_t> zero(xshape.size(), 0);
        for_each_broadcast(
            xshape, st, zero,
            [&](std::int64_t i, std::int64_t oa, std::int64_t) {
              gx[i] += g[oa];
            });
      });
}

Tensor reduce_mean(const Tensor& x, std::vector<int> axes, bool keepdims) {
  const Shape& s = x.shape();
  auto norm = normalize_axes(axes, s.size());
  std::int64_t count = 1;
  for (int a : norm) count *= s[a];
  return scale(reduce_sum(x, std::move(axes), keepdims),
               scalar(1) / static_cast<scalar>(count));
}

Tensor sum_all(const Tensor& x) {
  std::vector<int> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return reduce_sum(x, std::move(axes), false);
}

// ---------------------------------------------------------------------------
// matmul / linear / gathers

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError(detail::cat("matmul: both operands need rank >= 2, got ",
                                 shape_str(sa), " and ", shape_str(sb)));
  }
  const std::int64_t m = sa[sa.size() - 2];
  const std::int64_t k = sa[sa.size() - 1];
  const std::int64_t k2 = sb[sb.size() - 2];
  const std::int64_t n = sb[sb.size() - 1];
  if (k != k2) {
    throw ShapeError(detail::cat("matmul: inner dimensions differ, ",
                                 shape_str(sa), " x ", shape_str(sb)));
  }
  Shape ba(sa.begin(), sa.end() - 2);
  Shape bb(sb.begin(), sb.end() - 2);
  Shape batch = broadcast_shape(ba, bb, "matmul");
  const auto stra = broadcast_strides(ba, batch);
  const auto strb = broadcast_strides(bb, batch);

  Shape oshape = batch;
  oshape.push_back(m);
  oshape.push_back(n);
  Buffer out(static_cast<std::size_t>(numel_of(oshape)));

  const scalar* pa = a.data().data();
  const scalar* pb = b.data().data();
  const std::int64_t asz = m * k, bsz = k * n, osz = m * n;
  for_each_broadcast(batch, stra, strb,
                     [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
                       MapM(out.data() + i * osz, m, n).noalias() =
                           MapC(pa + oa * asz, m, k) * MapC(pb + ob * bsz, k, n);
                     });

  return make_op_output(
      std::move(oshape), std::move(out), "matmul", {a, b},
      [a, b, batch, stra, strb, m, n, k, asz, bsz, osz](const TensorImpl& o) {
        const scalar* g = o.grad.data();
        const scalar* pa = a.data().data();
        const scalar* pb = b.data().data();
        const bool ga = a.impl()->requires_grad;
        const bool gb = b.impl()->requires_grad;
        if (ga) a.impl()->ensure_grad();
        if (gb) b.impl()->ensure_grad();
        for_each_broadcast(
            batch, stra, strb,
            [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
              MapC go(g + i * osz, m, n);
              if (ga) {
                MapM(a.impl()->grad.data() + oa * asz, m, k).noalias() +=
                    go * MapC(pb + ob * bsz, k, n).transpose();
              }
              if (gb) {
                MapM(b.impl()->grad.data() + ob * bsz, k, n).noalias() +=
                    MapC(pa + oa * asz, m, k).transpose() * go;
              }
            });
      });
}

// x[..., in] * w[in, out] (+ b). Forward kernel keeps every output row a
// fixed-order function of its own input row.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const Shape& sx = x.shape();
  if (sx.empty() || w.rank() != 2) {
    throw ShapeError("linear: x needs rank >= 1 and w rank 2");
  }
  const std::int64_t in = sx.back();
  if (w.shape()[0] != in) {
    throw ShapeError(detail::cat("linear: x ", shape_str(sx), " vs w ",
                                 shape_str(w.shape())));
  }
  const std::int64_t out_dim = w.shape()[1];
  if (b.defined() && (b.rank() != 1 || b.shape()[0] != out_dim)) {
    throw ShapeError(detail::cat("linear: bias ", shape_str(b.shape()),
                                 " vs out dim ", out_dim));
  }
  const std::int64_t rows = x.numel() / in;
  Shape oshape = sx;
  oshape.back() = out_dim;
  Buffer out(static_cast<std::size_t>(rows * out_dim));

  const scalar* px = x.data().data();
  const scalar* pw = w.data().data();
  const scalar* pbias = b.defined() ? b.data().data() : nullptr;
  // Row-major axpy with a fixed accumulation order per output element, so
  // each output row is a pure function of its own input row. Unrolled over
  // k to amortize the load/store of y.
  for (std::int64_t r = 0; r < rows; ++r) {
    scalar* y = out.data() + r * out_dim;
    if (pbias) {
      std::memcpy(y, pbias, sizeof(scalar) * static_cast<std::size_t>(out_dim));
    } else {
      std::memset(y, 0, sizeof(scalar) * static_cast<std::size_t>(out_dim));
    }
    const scalar* xr = px + r * in;
    std::int64_t kk = 0;
    for (; kk + 4 <= in; kk += 4) {
      const scalar s0 = xr[kk], s1 = xr[kk + 1], s2 = xr[kk + 2],
                   s3 = xr[kk + 3];
      const scalar* w0 = pw + kk * out_dim;
      const scalar* w1 = w0 + out_dim;
      const scalar* w2 = w1 + out_dim;
      const scalar* w3 = w2 + out_dim;
      for (std::int64_t o = 0; o < out_dim; ++o) {
        scalar acc = y[o];
        acc += s0 * w0[o];
        acc += s1 * w1[o];
        acc += s2 * w2[o];
        acc += s3 * w3[o];
        y[o] = acc;
      }
    }
    for (; kk < in; ++kk) {
      const scalar s = xr[kk];
      const scalar* wk = pw + kk * out_dim;
      for (std::int64_t o = 0; o < out_dim; ++o) y[o] += s * wk[o];
    }
  }

  std::vector<Tensor> inputs = b.defined() ? std::vector<Tensor>{x, w, b}
                                           : std::vector<Tensor>{x, w};
  return make_op_output(
      std::move(oshape), std::move(out), "linear", std::move(inputs),
      [x, w, b, rows, in, out_dim](const TensorImpl& o) {
        MapC go(o.grad.data(), rows, out_dim);
        if (x.impl()->requires_grad) {
          x.impl()->ensure_grad();
          MapM(x.impl()->grad.data(), rows, in).noalias() +=
              go * MapC(w.data().data(), in, out_dim).transpose();
        }
        if (w.impl()->requires_grad) {
          w.impl()->ensure_grad();
          MapM(w.impl()->grad.data(), in, out_dim).noalias() +=
              MapC(x.data().data(), rows, in).transpose() * go;
        }
        if (b.defined() && b.impl()->requires_grad) {
          b.impl()->ensure_grad();
          scalar* gb = b.impl()->grad.data();
          const scalar* g = o.grad.data();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t c = 0; c < out_dim; ++c) gb[c] += g[r * out_dim + c];
        }
      });
}

Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank 2");
  const std::int64_t v = table.shape()[0];
  const std::int64_t d = table.shape()[1];
  for (auto id : ids) {
    if (id < 0 || id >= v) {
      throw ContractError(detail::cat("gather_rows: id ", id,
                                      " outside table of ", v, " rows"));
    }
  }
  Buffer out(ids.size() * static_cast<std::size_t>(d));
  const scalar* pt = table.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::memcpy(out.data() + i * d, pt + ids[i] * d,
                sizeof(scalar) * static_cast<std::size_t>(d));
  }
  return make_op_output(
      Shape{static_cast<std::int64_t>(ids.size()), d}, std::move(out),
      "gather_rows", {table}, [table, ids, d](const TensorImpl& o) {
        if (!table.impl()->requires_grad) return;
        table.impl()->ensure_grad();
        scalar* gt = table.impl()->grad.data();
        const scalar* g = o.grad.data();
        for (std::size_t i = 0; i < ids.size(); ++i)
          for (std::int64_t c = 0; c < d; ++c) gt[ids[i] * d + c] += g[i * d + c];
      });
}

Tensor gather_bias(const Tensor& table, const std::vector<std::int32_t>& index_map,
                   std::int64_t t) {
  if (table.rank() != 2) throw ShapeError("gather_bias: table must be rank 2");
  if (static_cast<std::int64_t>(index_map.size()) != t * t) {
    throw ShapeError(detail::cat("gather_bias: index map has ", index_map.size(),
                                 " entries, expected ", t * t));
  }
  const std::int64_t heads = table.shape()[0];
  const std::int64_t len = table.shape()[1];
  for (auto idx : index_map) {
    if (idx < 0 || idx >= len) {
      throw ShapeError(detail::cat("gather_bias: index ", idx,
                                   " outside table of length ", len));
    }
  }
  Buffer out(static_cast<std::size_t>(heads * t * t));
  const scalar* pt = table.data().data();
  for (std::int64_t h = 0; h < heads; ++h) {
    const scalar* row = pt + h * len;
    scalar* dst = out.data() + h * t * t;
    for (std::int64_t p = 0; p < t * t; ++p) dst[p] = row[index_map[p]];
  }
  return make_op_output(
      Shape{heads, t, t}, std::move(out), "gather_bias", {table},
      [table, index_map, t, heads, len](const TensorImpl& o) {
        if (!table.impl()->requires_grad) return;
        table.impl()->ensure_grad();
        scalar* gt = table.impl()->grad.data();
        const scalar* g = o.grad.data();
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t p = 0; p < t * t; ++p)
            gt[h * len + index_map[p]] += g[h * t * t + p];
      });
}

// ---------------------------------------------------------------------------
// softmax / layernorm

Tensor softmax(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || static_cast<std::size_t>(axis) >= s.size()) {
    throw ShapeError("softmax: axis out of range");
  }
  const std::int64_t len = s[axis];
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];

  Buffer out(static_cast<std::size_t>(x.numel()));
  const scalar* px = x.data().data();
  std::vector<double> terms(static_cast<std::size_t>(len));
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const scalar* row = px + o * len * inner + in;
      scalar* yrow = out.data() + o * len * inner + in;
      double m = -std::numeric_limits<double>::infinity();
      bool has_nan = false;
      for (std::int64_t j = 0; j < len; ++j) {
        const double v = static_cast<double>(row[j * inner]);
        if (std::isnan(v)) {
          has_nan = true;
          break;
        }
        m = std::max(m, v);
      }
      if (has_nan || !std::isfinite(m)) {
        // Non-finite input poisons the whole row with NaN; documented.
        for (std::int64_t j = 0; j < len; ++j)
          yrow[j * inner] = std::numeric_limits<scalar>::quiet_NaN();
        continue;
      }
      for (std::int64_t j = 0; j < len; ++j) {
        terms[j] = std::exp(static_cast<double>(row[j * inner]) - m);
      }
      const double denom = invariant_unit_sum(terms.data(), len);
      for (std::int64_t j = 0; j < len; ++j) {
        yrow[j * inner] = static_cast<scalar>(terms[j] / denom);
      }
    }
  }
  return make_op_output(
      s, std::move(out), "softmax", {x},
      [x, outer, len, inner](const TensorImpl& o) {
        if (!x.impl()->requires_grad) return;
        x.impl()->ensure_grad();
        scalar* gx = x.impl()->grad.data();
        const scalar* g = o.grad.data();
        const scalar* y = o.data.data();
        for (std::int64_t ot = 0; ot < outer; ++ot) {
          for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = ot * len * inner + in;
            scalar dot = 0;
            for (std::int64_t j = 0; j < len; ++j)
              dot += g[base + j * inner] * y[base + j * inner];
            for (std::int64_t j = 0; j < len; ++j)
              gx[base + j * inner] +=
                  y[base + j * inner] * (g[base + j * inner] - dot);
          }
        }
      });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 scalar eps) {
  if (eps <= scalar(0)) {
    throw ConfigError("layernorm: eps must be positive");
  }
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("layernorm: needs rank >= 1");
  const std::int64_t d = s.back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError(detail::cat("layernorm: gamma/beta must match last dim ",
                                 d));
  }
  const std::int64_t rows = x.numel() / d;
  Buffer out(static_cast<std::size_t>(x.numel()));
  std::vector<scalar> inv_std(static_cast<std::size_t>(rows));
  std::vector<scalar> means(static_cast<std::size_t>(rows));
  const scalar* px = x.data().data();
  const scalar* pg = gamma.data().data();
  const scalar* pb = beta.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const scalar* xr = px + r * d;
    double mean = 0;
    for (std::int64_t j = 0; j < d; ++j) mean += static_cast<double>(xr[j]);
    mean /= static_cast<double>(d);
    double var = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = static_cast<double>(xr[j]) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    means[r] = static_cast<scalar>(mean);
    inv_std[r] = static_cast<scalar>(inv);
    scalar* yr = out.data() + r * d;
    for (std::int64_t j = 0; j < d; ++j) {
      yr[j] = static_cast<scalar>(
          (static_cast<double>(xr[j]) - mean) * inv * pg[j] + pb[j]);
    }
  }
  return make_op_output(
      s, std::move(out), "layernorm", {x, gamma, beta},
      [x, gamma, beta, rows, d, means, inv_std](const TensorImpl& o) {
        const scalar* g = o.grad.data();
        const scalar* px = x.data().data();
        const scalar* pg = gamma.data().data();
        const bool need_x = x.impl()->requires_grad;
        const bool need_g = gamma.impl()->requires_grad;
        const bool need_b = beta.impl()->requires_grad;
        if (need_x) x.impl()->ensure_grad();
        if (need_g) gamma.impl()->ensure_grad();
        if (need_b) beta.impl()->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const scalar* xr = px + r * d;
          const scalar* gr = g + r * d;
          const double mean = means[r], inv = inv_std[r];
          double sum_dxhat = 0, sum_dxhat_xhat = 0;
          for (std::int64_t j = 0; j < d; ++j) {
            const double xhat = (static_cast<double>(xr[j]) - mean) * inv;
            const double dxhat = static_cast<double>(gr[j]) * pg[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            if (need_g) gamma.impl()->grad[j] += static_cast<scalar>(gr[j] * xhat);
            if (need_b) beta.impl()->grad[j] += gr[j];
          }
          if (need_x) {
            scalar* gx = x.impl()->grad.data() + r * d;
            const double dn = static_cast<double>(d);
            for (std::int64_t j = 0; j < d; ++j) {
              const double xhat = (static_cast<double>(xr[j]) - mean) * inv;
              const double dxhat = static_cast<double>(gr[j]) * pg[j];
              gx[j] += static_cast<scalar>(
                  inv / dn * (dn * dxhat - sum_dxhat - xhat * sum_dxhat_xhat));
            }
          }
        }
      });
}

Tensor layernorm_channels(const Tensor& x, const Tensor& gamma,
                          const Tensor& beta, scalar eps) {
  if (eps <= scalar(0)) throw ConfigError("layernorm: eps must be positive");
  if (x.rank() != 4) {
    throw ShapeError("layernorm_channels: input must be [B,C,H,W]");
  }
  const std::int64_t batch = x.shape()[0], c = x.shape()[1],
                     hw = x.shape()[2] * x.shape()[3];
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("layernorm_channels: gamma/beta must match channels");
  }
  Buffer out(static_cast<std::size_t>(x.numel()));
  std::vector<scalar> means(static_cast<std::size_t>(batch * hw));
  std::vector<scalar> inv_std(static_cast<std::size_t>(batch * hw));
  const scalar* px = x.data().data();
  const scalar* pg = gamma.data().data();
  const scalar* pb = beta.data().data();
  const scalar inv_c = scalar(1) / static_cast<scalar>(c);
  // plane-streaming passes keep reads sequential: channels are the strided
  // axis, positions the contiguous one
  for (std::int64_t s = 0; s < batch; ++s) {
    scalar* mean = means.data() + s * hw;
    scalar* inv = inv_std.data() + s * hw;
    std::fill(mean, mean + hw, scalar(0));
    std::fill(inv, inv + hw, scalar(0));
    const scalar* base = px + s * c * hw;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const scalar* plane = base + ch * hw;
      for (std::int64_t p = 0; p < hw; ++p) mean[p] += plane[p];
    }
    for (std::int64_t p = 0; p < hw; ++p) mean[p] *= inv_c;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const scalar* plane = base + ch * hw;
      for (std::int64_t p = 0; p < hw; ++p) {
        const scalar d = plane[p] - mean[p];
        inv[p] += d * d;
      }
    }
    for (std::int64_t p = 0; p < hw; ++p) {
      inv[p] = scalar(1) / std::sqrt(inv[p] * inv_c + eps);
    }
    scalar* obase = out.data() + s * c * hw;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const scalar* plane = base + ch * hw;
      scalar* oplane = obase + ch * hw;
      const scalar g = pg[ch], b = pb[ch];
      for (std::int64_t p = 0; p < hw; ++p) {
        oplane[p] = (plane[p] - mean[p]) * inv[p] * g + b;
      }
    }
  }
  return make_op_output(
      x.shape(), std::move(out), "layernorm_channels", {x, gamma, beta},
      [x, gamma, beta, batch, c, hw, means, inv_std](const TensorImpl& o) {
        const scalar* g = o.grad.data();
        const scalar* px = x.data().data();
        const scalar* pg = gamma.data().data();
        const bool need_x = x.impl()->requires_grad;
        const bool need_g = gamma.impl()->requires_grad;
        const bool need_b = beta.impl()->requires_grad;
        if (need_x) x.impl()->ensure_grad();
        if (need_g) gamma.impl()->ensure_grad();
        if (need_b) beta.impl()->ensure_grad();
        std::vector<scalar> sum_dxhat(static_cast<std::size_t>(hw));
        std::vector<scalar> sum_dxhat_xhat(static_cast<std::size_t>(hw));
        const scalar cn = static_cast<scalar>(c);
        for (std::int64_t s = 0; s < batch; ++s) {
          const scalar* base = px + s * c * hw;
          const scalar* gbase = g + s * c * hw;
          const scalar* mean = means.data() + s * hw;
          const scalar* inv = inv_std.data() + s * hw;
          std::fill(sum_dxhat.begin(), sum_dxhat.end(), scalar(0));
          std::fill(sum_dxhat_xhat.begin(), sum_dxhat_xhat.end(), scalar(0));
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const scalar* plane = base + ch * hw;
            const scalar* gplane = gbase + ch * hw;
            const scalar gm = pg[ch];
            scalar acc_g = 0, acc_b = 0;
            for (std::int64_t p = 0; p < hw; ++p) {
              const scalar xhat = (plane[p] - mean[p]) * inv[p];
              const scalar dxhat = gplane[p] * gm;
              sum_dxhat[p] += dxhat;
              sum_dxhat_xhat[p] += dxhat * xhat;
              acc_g += gplane[p] * xhat;
              acc_b += gplane[p];
            }
            if (need_g) gamma.impl()->grad[ch] += acc_g;
            if (need_b) beta.impl()->grad[ch] += acc_b;
          }
          if (need_x) {
            scalar* gx = x.impl()->grad.data() + s * c * hw;
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const scalar* plane = base + ch * hw;
              const scalar* gplane = gbase + ch * hw;
              scalar* gxplane = gx + ch * hw;
              const scalar gm = pg[ch];
              for (std::int64_t p = 0; p < hw; ++p) {
                const scalar xhat = (plane[p] - mean[p]) * inv[p];
                const scalar dxhat = gplane[p] * gm;
                gxplane[p] += inv[p] / cn *
                              (cn * dxhat - sum_dxhat[p] -
                               xhat * sum_dxhat_xhat[p]);
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

struct ConvDims {
  std::int64_t batch, cin, h, w, cout, cg, kh, kw, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad,
                   int groups) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d: x and w must be rank 4");
  }
  if (stride < 1 || pad < 0 || groups < 1) {
    throw ConfigError("conv2d: stride >= 1, pad >= 0, groups >= 1 required");
  }
  ConvDims dm{};
  dm.batch = x.shape()[0];
  dm.cin = x.shape()[1];
  dm.h = x.shape()[2];
  dm.w = x.shape()[3];
  dm.cout = w.shape()[0];
  dm.cg = w.shape()[1];
  dm.kh = w.shape()[2];
  dm.kw = w.shape()[3];
  if (dm.cin % groups != 0 || dm.cout % groups != 0) {
    throw ShapeError(detail::cat("conv2d: channels (", dm.cin, " in, ", dm.cout,
                                 " out) not divisible by groups=", groups));
  }
  if (dm.cg != dm.cin / groups) {
    throw ShapeError(detail::cat("conv2d: weight ", shape_str(w.shape()),
                                 " inconsistent with input ",
                                 shape_str(x.shape()), " and groups=", groups));
  }
  dm.oh = (dm.h + 2 * pad - dm.kh) / stride + 1;
  dm.ow = (dm.w + 2 * pad - dm.kw) / stride + 1;
  if (dm.h + 2 * pad < dm.kh || dm.w + 2 * pad < dm.kw || dm.oh < 1 ||
      dm.ow < 1) {
    throw ShapeError(detail::cat("conv2d: kernel ", dm.kh, "x", dm.kw,
                                 " does not fit input ", shape_str(x.shape()),
                                 " with pad ", pad));
  }
  return dm;
}

void im2col(const scalar* x, const ConvDims& dm, int stride, int pad,
            scalar* cols) {
  // cols layout: [cg*kh*kw, oh*ow]
  const std::int64_t ohw = dm.oh * dm.ow;
  for (std::int64_t c = 0; c < dm.cg; ++c) {
    for (std::int64_t ky = 0; ky < dm.kh; ++ky) {
      for (std::int64_t kx = 0; kx < dm.kw; ++kx) {
        scalar* dst = cols + ((c * dm.kh + ky) * dm.kw + kx) * ohw;
        for (std::int64_t oy = 0; oy < dm.oh; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          for (std::int64_t ox = 0; ox < dm.ow; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            dst[oy * dm.ow + ox] =
                (iy >= 0 && iy < dm.h && ix >= 0 && ix < dm.w)
                    ? x[(c * dm.h + iy) * dm.w + ix]
                    : scalar(0);
          }
        }
      }
    }
  }
}

void col2im_add(const scalar* cols, const ConvDims& dm, int stride, int pad,
                scalar* gx) {
  const std::int64_t ohw = dm.oh * dm.ow;
  for (std::int64_t c = 0; c < dm.cg; ++c) {
    for (std::int64_t ky = 0; ky < dm.kh; ++ky) {
      for (std::int64_t kx = 0; kx < dm.kw; ++kx) {
        const scalar* src = cols + ((c * dm.kh + ky) * dm.kw + kx) * ohw;
        for (std::int64_t oy = 0; oy < dm.oh; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= dm.h) continue;
          for (std::int64_t ox = 0; ox < dm.ow; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= dm.w) continue;
            gx[(c * dm.h + iy) * dm.w + ix] += src[oy * dm.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad, int groups) {
  const ConvDims dm = conv_dims(x, w, stride, pad, groups);
  if (b.defined() && b.numel() != dm.cout) {
    throw ShapeError("conv2d: bias size must equal output channels");
  }
  const std::int64_t ohw = dm.oh * dm.ow;
  const std::int64_t coutg = dm.cout / groups;
  Buffer out(
      static_cast<std::size_t>(dm.batch * dm.cout * ohw));
  const scalar* px = x.data().data();
  const scalar* pw = w.data().data();
  const bool depthwise = (groups == dm.cin && dm.cg == 1 && dm.cout == dm.cin);
  const bool pointwise = (dm.kh == 1 && dm.kw == 1 && stride == 1 &&
                          pad == 0 && groups == 1);

  if (pointwise) {
    // plain per-sample GEMM, no im2col staging
    for (std::int64_t s = 0; s < dm.batch; ++s) {
      MapM(out.data() + s * dm.cout * ohw, dm.cout, ohw).noalias() =
          MapC(pw, dm.cout, dm.cin) * MapC(px + s * dm.cin * ohw, dm.cin, ohw);
    }
    if (b.defined()) {
      for (std::int64_t s = 0; s < dm.batch; ++s) {
        for (std::int64_t c = 0; c < dm.cout; ++c) {
          scalar* oc = out.data() + (s * dm.cout + c) * ohw;
          const scalar bias = b.data()[c];
          for (std::int64_t i = 0; i < ohw; ++i) oc[i] += bias;
        }
      }
    }
  } else if (depthwise) {
    for (std::int64_t s = 0; s < dm.batch; ++s) {
      for (std::int64_t c = 0; c < dm.cin; ++c) {
        const scalar* xc = px + (s * dm.cin + c) * dm.h * dm.w;
        const scalar* wc = pw + c * dm.kh * dm.kw;
        scalar* oc = out.data() + (s * dm.cout + c) * ohw;
        const scalar bias = b.defined() ? b.data()[c] : scalar(0);
        for (std::int64_t oy = 0; oy < dm.oh; ++oy) {
          for (std::int64_t ox = 0; ox < dm.ow; ++ox) {
            scalar acc = bias;
            for (std::int64_t ky = 0; ky < dm.kh; ++ky) {
              const std::int64_t iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= dm.h) continue;
              for (std::int64_t kx = 0; kx < dm.kw; ++kx) {
                const std::int64_t ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= dm.w) continue;
                acc += xc[iy * dm.w + ix] * wc[ky * dm.kw + kx];
              }
            }
            oc[oy * dm.ow + ox] = acc;
          }
        }
      }
    }
  } else {
    std::vector<scalar> cols(
        static_cast<std::size_t>(dm.cg * dm.kh * dm.kw * ohw));
    for (std::int64_t s = 0; s < dm.batch; ++s) {
      for (int g = 0; g < groups; ++g) {
        im2col(px + (s * dm.cin + g * dm.cg) * dm.h * dm.w, dm, stride, pad,
               cols.data());
        MapM(out.data() + (s * dm.cout + g * coutg) * ohw, coutg, ohw)
            .noalias() = MapC(pw + g * coutg * dm.cg * dm.kh * dm.kw, coutg,
                              dm.cg * dm.kh * dm.kw) *
                         MapC(cols.data(), dm.cg * dm.kh * dm.kw, ohw);
      }
      if (b.defined()) {
        for (std::int64_t c = 0; c < dm.cout; ++c) {
          scalar* oc = out.data() + (s * dm.cout + c) * ohw;
          const scalar bias = b.data()[c];
          for (std::int64_t i = 0; i < ohw; ++i) oc[i] += bias;
        }
      }
    }
  }

  std::vector<Tensor> inputs = b.defined() ? std::vector<Tensor>{x, w, b}
                                           : std::vector<Tensor>{x, w};
  return make_op_output(
      Shape{dm.batch, dm.cout, dm.oh, dm.ow}, std::move(out), "conv2d",
      std::move(inputs),
      [x, w, b, dm, stride, pad, groups, coutg, depthwise,
       pointwise](const TensorImpl& o) {
        const std::int64_t ohw = dm.oh * dm.ow;
        const scalar* g = o.grad.data();
        const scalar* px = x.data().data();
        const scalar* pw = w.data().data();
        const bool need_x = x.impl()->requires_grad;
        const bool need_w = w.impl()->requires_grad;
        const bool need_b = b.defined() && b.impl()->requires_grad;
        if (need_x) x.impl()->ensure_grad();
        if (need_w) w.impl()->ensure_grad();
        if (need_b) b.impl()->ensure_grad();

        if (need_b) {
          scalar* gb = b.impl()->grad.data();
          for (std::int64_t s = 0; s < dm.batch; ++s)
            for (std::int64_t c = 0; c < dm.cout; ++c) {
              const scalar* gc = g + (s * dm.cout + c) * ohw;
              scalar acc = 0;
              for (std::int64_t i = 0; i < ohw; ++i) acc += gc[i];
              gb[c] += acc;
            }
        }
        if (pointwise) {
          for (std::int64_t s = 0; s < dm.batch; ++s) {
            MapC go(g + s * dm.cout * ohw, dm.cout, ohw);
            if (need_w) {
              MapM(w.impl()->grad.data(), dm.cout, dm.cin).noalias() +=
                  go * MapC(px + s * dm.cin * ohw, dm.cin, ohw).transpose();
            }
            if (need_x) {
              MapM(x.impl()->grad.data() + s * dm.cin * ohw, dm.cin, ohw)
                  .noalias() += MapC(pw, dm.cout, dm.cin).transpose() * go;
            }
          }
          return;
        }
        if (depthwise) {
          for (std::int64_t s = 0; s < dm.batch; ++s) {
            for (std::int64_t c = 0; c < dm.cin; ++c) {
              const scalar* xc = px + (s * dm.cin + c) * dm.h * dm.w;
              const scalar* wc = pw + c * dm.kh * dm.kw;
              const scalar* gc = g + (s * dm.cout + c) * ohw;
              scalar* gxc =
                  need_x ? x.impl()->grad.data() + (s * dm.cin + c) * dm.h * dm.w
                         : nullptr;
              scalar* gwc =
                  need_w ? w.impl()->grad.data() + c * dm.kh * dm.kw : nullptr;
              for (std::int64_t oy = 0; oy < dm.oh; ++oy) {
                for (std::int64_t ox = 0; ox < dm.ow; ++ox) {
                  const scalar go = gc[oy * dm.ow + ox];
                  for (std::int64_t ky = 0; ky < dm.kh; ++ky) {
                    const std::int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= dm.h) continue;
                    for (std::int64_t kx = 0; kx < dm.kw; ++kx) {
                      const std::int64_t ix = ox * stride - pad + kx;
                      if (ix < 0 || ix >= dm.w) continue;
                      if (gxc) gxc[iy * dm.w + ix] += go * wc[ky * dm.kw + kx];
                      if (gwc) gwc[ky * dm.kw + kx] += go * xc[iy * dm.w + ix];
                    }
                  }
                }
              }
            }
          }
          return;
        }
        std::vector<scalar> cols(
            static_cast<std::size_t>(dm.cg * dm.kh * dm.kw * ohw));
        std::vector<scalar> dcols(cols.size());
        for (std::int64_t s = 0; s < dm.batch; ++s) {
          for (int grp = 0; grp < groups; ++grp) {
            const scalar* wg = pw + grp * coutg * dm.cg * dm.kh * dm.kw;
            MapC go(g + (s * dm.cout + grp * coutg) * ohw, coutg, ohw);
            if (need_w) {
              im2col(px + (s * dm.cin + grp * dm.cg) * dm.h * dm.w, dm, stride,
                     pad, cols.data());
              MapM(w.impl()->grad.data() + grp * coutg * dm.cg * dm.kh * dm.kw,
                   coutg, dm.cg * dm.kh * dm.kw)
                  .noalias() +=
                  go * MapC(cols.data(), dm.cg * dm.kh * dm.kw, ohw).transpose();
            }
            if (need_x) {
              MapM(dcols.data(), dm.cg * dm.kh * dm.kw, ohw).noalias() =
                  MapC(wg, coutg, dm.cg * dm.kh * dm.kw).transpose() * go;
              col2im_add(dcols.data(), dm, stride, pad,
                         x.impl()->grad.data() +
                             (s * dm.cin + grp * dm.cg) * dm.h * dm.w);
            }
          }
        }
      });
}

Tensor maxpool2x2(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("maxpool2x2: input must be rank 4");
  const std::int64_t batch = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
                     w = x.shape()[3];
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError(detail::cat("maxpool2x2: spatial dims must be even, got ",
                                 shape_str(x.shape())));
  }
  const std::int64_t oh = h / 2, ow = w / 2;
  Buffer out(static_cast<std::size_t>(batch * c * oh * ow));
  std::vector<std::int64_t> argmax(out.size());
  const scalar* px = x.data().data();
  std::int64_t oi = 0;
  for (std::int64_t s = 0; s < batch * c; ++s) {
    const scalar* plane = px + s * h * w;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox, ++oi) {
        std::int64_t best = (2 * oy) * w + 2 * ox;
        scalar bv = plane[best];
        const std::int64_t cand[3] = {(2 * oy) * w + 2 * ox + 1,
                                      (2 * oy + 1) * w + 2 * ox,
                                      (2 * oy + 1) * w + 2 * ox + 1};
        for (auto idx : cand) {
          if (plane[idx] > bv) {
            bv = plane[idx];
            best = idx;
          }
        }
        out[oi] = bv;
        argmax[oi] = s * h * w + best;
      }
    }
  }
  return make_op_output(Shape{batch, c, oh, ow}, std::move(out), "maxpool2x2",
                        {x}, [x, argmax](const TensorImpl& o) {
                          if (!x.impl()->requires_grad) return;
                          x.impl()->ensure_grad();
                          scalar* gx = x.impl()->grad.data();
                          const scalar* g = o.grad.data();
                          for (std::size_t i = 0; i < argmax.size(); ++i)
                            gx[argmax[i]] += g[i];
                        });
}

// ---------------------------------------------------------------------------
// attention kernels

Tensor attention_scores(const Tensor& q, const Tensor& k, scalar scl,
                        const Tensor& bias) {
  if (q.rank() != 4 || k.rank() != 4 || q.shape() != k.shape()) {
    throw ShapeError(detail::cat("attention_scores: q ", shape_str(q.shape()),
                                 " vs k ", shape_str(k.shape())));
  }
  const std::int64_t batch = q.shape()[0], heads = q.shape()[1],
                     t = q.shape()[2], hd = q.shape()[3];
  if (bias.defined() &&
      (bias.rank() != 3 || bias.shape()[0] != heads || bias.shape()[1] != t ||
       bias.shape()[2] != t)) {
    throw ShapeError(detail::cat("attention_scores: bias ",
                                 shape_str(bias.shape()), " vs sequence of ", t,
                                 " tokens and ", heads, " heads"));
  }
  Buffer out(static_cast<std::size_t>(batch * heads * t * t));
  std::vector<scalar> kt(static_cast<std::size_t>(hd * t));
  const scalar* pq = q.data().data();
  const scalar* pk = k.data().data();
  const scalar* pbias = bias.defined() ? bias.data().data() : nullptr;
  for (std::int64_t bh = 0; bh < batch * heads; ++bh) {
    const scalar* kb = pk + bh * t * hd;
    for (std::int64_t j = 0; j < t; ++j)
      for (std::int64_t d = 0; d < hd; ++d) kt[d * t + j] = kb[j * hd + d];
    const std::int64_t h = bh % heads;
    for (std::int64_t i = 0; i < t; ++i) {
      const scalar* qi = pq + (bh * t + i) * hd;
      scalar* row = out.data() + (bh * t + i) * t;
      std::memset(row, 0, sizeof(scalar) * static_cast<std::size_t>(t));
      for (std::int64_t d = 0; d < hd; ++d) {
        const scalar s = qi[d];
        const scalar* kr = kt.data() + d * t;
        for (std::int64_t j = 0; j < t; ++j) row[j] += s * kr[j];
      }
      if (pbias) {
        const scalar* br = pbias + (h * t + i) * t;
        for (std::int64_t j = 0; j < t; ++j) row[j] = row[j] * scl + br[j];
      } else {
        for (std::int64_t j = 0; j < t; ++j) row[j] *= scl;
      }
    }
  }
  std::vector<Tensor> inputs = bias.defined() ? std::vector<Tensor>{q, k, bias}
                                              : std::vector<Tensor>{q, k};
  return make_op_output(
      Shape{batch, heads, t, t}, std::move(out), "attention_scores",
      std::move(inputs),
      [q, k, bias, scl, batch, heads, t, hd](const TensorImpl& o) {
        const scalar* g = o.grad.data();
        const bool need_q = q.impl()->requires_grad;
        const bool need_k = k.impl()->requires_grad;
        const bool need_b = bias.defined() && bias.impl()->requires_grad;
        if (need_q) q.impl()->ensure_grad();
        if (need_k) k.impl()->ensure_grad();
        if (need_b) bias.impl()->ensure_grad();
        for (std::int64_t bh = 0; bh < batch * heads; ++bh) {
          MapC go(g + bh * t * t, t, t);
          if (need_q) {
            MapM(q.impl()->grad.data() + bh * t * hd, t, hd).noalias() +=
                scl * (go * MapC(k.data().data() + bh * t * hd, t, hd));
          }
          if (need_k) {
            MapM(k.impl()->grad.data() + bh * t * hd, t, hd).noalias() +=
                scl *
                (go.transpose() * MapC(q.data().data() + bh * t * hd, t, hd));
          }
          if (need_b) {
            const std::int64_t h = bh % heads;
            scalar* gb = bias.impl()->grad.data() + h * t * t;
            const scalar* gg = g + bh * t * t;
            for (std::int64_t p = 0; p < t * t; ++p) gb[p] += gg[p];
          }
        }
      });
}

Tensor attention_apply(const Tensor& p, const Tensor& v) {
  if (p.rank() != 4 || v.rank() != 4) {
    throw ShapeError("attention_apply: p and v must be rank 4");
  }
  const std::int64_t batch = p.shape()[0], heads = p.shape()[1],
                     t = p.shape()[2];
  if (p.shape()[3] != t || v.shape()[0] != batch || v.shape()[1] != heads ||
      v.shape()[2] != t) {
    throw ShapeError(detail::cat("attention_apply: p ", shape_str(p.shape()),
                                 " vs v ", shape_str(v.shape())));
  }
  const std::int64_t hd = v.shape()[3];
  Buffer out(static_cast<std::size_t>(batch * heads * t * hd));
  const scalar* pp = p.data().data();
  const scalar* pv = v.data().data();
  std::vector<double> up(static_cast<std::size_t>(hd));
  std::vector<double> down(static_cast<std::size_t>(hd));
  std::vector<__int128> acc(static_cast<std::size_t>(hd));
  for (std::int64_t bh = 0; bh < batch * heads; ++bh) {
    const scalar* vb = pv + bh * t * hd;
    // Column scales chosen from the (order-free) max magnitude so each
    // product lands on a fixed grid below 2^62: the per-term conversion is
    // then one int64 truncation and the 128-bit running total never
    // overflows or rounds, making the row sums order-invariant.
    for (std::int64_t d = 0; d < hd; ++d) {
      double m = 0;
      for (std::int64_t j = 0; j < t; ++j)
        m = std::max(m, std::abs(static_cast<double>(vb[j * hd + d])));
      const int e = (m > 0 && std::isfinite(m)) ? 61 - std::ilogb(m) : 0;
      up[d] = std::ldexp(1.0, e);
      down[d] = std::ldexp(1.0, -e);
    }
    for (std::int64_t i = 0; i < t; ++i) {
      const scalar* pr = pp + (bh * t + i) * t;
      std::fill(acc.begin(), acc.end(), static_cast<__int128>(0));
      for (std::int64_t j = 0; j < t; ++j) {
        const double pij = static_cast<double>(pr[j]);
        const scalar* vr = vb + j * hd;
        for (std::int64_t d = 0; d < hd; ++d) {
          const double term = pij * static_cast<double>(vr[d]) * up[d];
          acc[d] += static_cast<long long>(std::isfinite(term) ? term : 0.0);
        }
      }
      scalar* orow = out.data() + (bh * t + i) * hd;
      for (std::int64_t d = 0; d < hd; ++d) {
        orow[d] = static_cast<scalar>(static_cast<double>(acc[d]) * down[d]);
      }
    }
  }
  return make_op_output(
      Shape{batch, heads, t, hd}, std::move(out), "attention_apply", {p, v},
      [p, v, batch, heads, t, hd](const TensorImpl& o) {
        const scalar* g = o.grad.data();
        const bool need_p = p.impl()->requires_grad;
        const bool need_v = v.impl()->requires_grad;
        if (need_p) p.impl()->ensure_grad();
        if (need_v) v.impl()->ensure_grad();
        for (std::int64_t bh = 0; bh < batch * heads; ++bh) {
          MapC go(g + bh * t * hd, t, hd);
          if (need_p) {
            MapM(p.impl()->grad.data() + bh * t * t, t, t).noalias() +=
                go * MapC(v.data().data() + bh * t * hd, t, hd).transpose();
          }
          if (need_v) {
            MapM(v.impl()->grad.data() + bh * t * hd, t, hd).noalias() +=
                MapC(p.data().data() + bh * t * t, t, t).transpose() * go;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// loss

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels,
                     scalar smoothing) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be rank 2");
  const std::int64_t batch = logits.shape()[0];
  const std::int64_t classes = logits.shape()[1];
  if (static_cast<std::int64_t>(labels.size()) != batch) {
    throw ShapeError("cross_entropy: one label per row required");
  }
  for (auto l : labels) {
    if (l < 0 || l >= classes) {
      throw ContractError(detail::cat("cross_entropy: label ", l,
                                      " outside [0,", classes, ")"));
    }
  }
  const double eps = static_cast<double>(smoothing);
  const scalar* pl = logits.data().data();
  double total = 0;
  for (std::int64_t r = 0; r < batch; ++r) {
    const scalar* row = pl + r * classes;
    double m = -std::numeric_limits<double>::infinity();
    for (std::int64_t c = 0; c < classes; ++c)
      m = std::max(m, static_cast<double>(row[c]));
    double sum_exp = 0, sum_logit = 0;
    for (std::int64_t c = 0; c < classes; ++c) {
      sum_exp += std::exp(static_cast<double>(row[c]) - m);
      sum_logit += static_cast<double>(row[c]);
    }
    const double lse = m + std::log(sum_exp);
    total += lse - (1.0 - eps) * static_cast<double>(row[labels[r]]) -
             eps / static_cast<double>(classes) * sum_logit;
  }
  total /= static_cast<double>(batch);

  return make_op_output(
      Shape{}, {static_cast<scalar>(total)}, "cross_entropy", {logits},
      [logits, labels, batch, classes, eps](const TensorImpl& o) {
        if (!logits.impl()->requires_grad) return;
        logits.impl()->ensure_grad();
        const double go = static_cast<double>(o.grad[0]) /
                          static_cast<double>(batch);
        const scalar* pl = logits.data().data();
        scalar* gl = logits.impl()->grad.data();
        for (std::int64_t r = 0; r < batch; ++r) {
          const scalar* row = pl + r * classes;
          double m = -std::numeric_limits<double>::infinity();
          for (std::int64_t c = 0; c < classes; ++c)
            m = std::max(m, static_cast<double>(row[c]));
          double sum_exp = 0;
          for (std::int64_t c = 0; c < classes; ++c)
            sum_exp += std::exp(static_cast<double>(row[c]) - m);
          for (std::int64_t c = 0; c < classes; ++c) {
            const double p = std::exp(static_cast<double>(row[c]) - m) / sum_exp;
            const double target =
                (c == labels[r] ? 1.0 - eps : 0.0) + eps / classes;
            gl[r * classes + c] += static_cast<scalar>(go * (p - target));
          }
        }
      });
}

}  // namespace metaformer
