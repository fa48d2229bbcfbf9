#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "metaformer/ops.hpp"
#include "metaformer/rng.hpp"
#include "metaformer/tensor.hpp"

namespace testutil {

// Central-difference gradient check. `f` rebuilds the graph from the given
// leaves on every call and returns a scalar loss. Returns the worst relative
// error across all (or `max_coords` sampled) leaf coordinates. The numeric
// side touches only forward evaluations, so it stays independent of the
// backward implementation it is checking.
inline double grad_rel_err(const std::function<metaformer::Tensor()>& f,
                           std::vector<metaformer::Tensor> leaves,
                           double h = 1e-5, std::int64_t max_coords = -1,
                           metaformer::Rng* rng = nullptr) {
  using metaformer::Tensor;
  for (auto& leaf : leaves) leaf.zero_grad();
  Tensor loss = f();
  loss.backward();

  std::vector<std::vector<metaformer::scalar>> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) {
    analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
  }

  double worst = 0.0;
  metaformer::NoGradGuard ng;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const std::int64_t n = leaf.numel();
    std::vector<std::int64_t> coords;
    if (max_coords > 0 && max_coords < n) {
      for (std::int64_t i = 0; i < max_coords; ++i) {
        coords.push_back(static_cast<std::int64_t>(
            rng ? rng->uniform_int(static_cast<std::uint64_t>(n))
                : (i * 977) % n));
      }
    } else {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[i] = i;
    }
    for (auto ci : coords) {
      auto data = leaf.mutable_data();
      const metaformer::scalar orig = data[ci];
      data[ci] = orig + static_cast<metaformer::scalar>(h);
      const double fp = static_cast<double>(f().item());
      data[ci] = orig - static_cast<metaformer::scalar>(h);
      const double fm = static_cast<double>(f().item());
      data[ci] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = static_cast<double>(analytic[li][ci]);
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

inline metaformer::Tensor random_tensor(metaformer::Shape shape,
                                        metaformer::Rng& rng,
                                        bool requires_grad = true) {
  return metaformer::Tensor::randn(std::move(shape), rng, 1.0, requires_grad);
}

}  // namespace testutil
