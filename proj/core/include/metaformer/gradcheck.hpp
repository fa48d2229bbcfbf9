#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "metaformer/tensor.hpp"

namespace metaformer {

struct GradCheckResult {
  std::string component;
  double worst_rel_err = 0;
};

// Central-difference check of d(loss)/d(leaves) against the recorded
// backward pass. The numeric side only calls the forward closure, so it is
// independent of the gradient implementation it audits.
double finite_difference_check(const std::function<Tensor()>& loss_fn,
                               std::vector<Tensor> leaves, double h = 1e-5,
                               std::int64_t max_coords_per_leaf = -1,
                               Rng* rng = nullptr);

// Per-op, per-block, and whole-model suites; `scope` is one of
// "ops" | "blocks" | "model".
std::vector<GradCheckResult> run_gradcheck(const std::string& scope,
                                           std::uint64_t seed);

}  // namespace metaformer
