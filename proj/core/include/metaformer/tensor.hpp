#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "metaformer/common.hpp"
#include "metaformer/rng.hpp"

namespace metaformer {

class Tensor;

namespace detail {

struct TensorImpl;

// One op record on the define-by-run tape. `backward` reads the output's
// grad and accumulates into the inputs' grads. Records are dropped as soon
// as a backward pass has consumed them.
struct OpNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  bool backward_done = false;  // set on the root once a pass has run
  std::shared_ptr<OpNode> producer;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), scalar(0));
  }
};

}  // namespace detail

// Gradient recording is on by default; disable it around inference-only
// forwards to skip tape construction.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major tensor handle with reverse-mode autodiff. Copies share
// the underlying storage (cheap value semantics for graph plumbing);
// parameter updates go through mutable_data().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, Buffer values, bool requires_grad = false);
  Tensor(Shape shape, const std::vector<scalar>& values,
         bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, scalar value, bool requires_grad = false);
  static Tensor scalar_value(scalar value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, scalar stddev = scalar(1),
                      bool requires_grad = false);
  static Tensor rand_uniform(Shape shape, Rng& rng, scalar lo, scalar hi,
                             bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::int64_t numel() const { return impl_->numel(); }

  std::span<const scalar> data() const { return impl_->data; }
  std::span<scalar> mutable_data() { return impl_->data; }
  std::span<const scalar> grad() const;
  scalar item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value);
  void zero_grad();

  // Reverse-mode pass from a scalar root. Frees consumed tape records;
  // calling it a second time on the same root throws.
  void backward();

  Tensor detach() const;  // same values, cut from the tape

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// The tape seen from one root, in topological order. backward() runs the
// exact reverse of that order and then releases the records.
class ComputationGraph {
 public:
  static ComputationGraph trace(const Tensor& root);
  void run_backward();
  std::size_t node_count() const { return order_.size(); }

 private:
  std::shared_ptr<detail::TensorImpl> root_;
  std::vector<std::shared_ptr<detail::TensorImpl>> order_;
};

namespace detail {

// Builds an op output: wires the producer record only when grads are both
// enabled and relevant. `backward` must accumulate (never overwrite).
Tensor make_op_output(Shape shape, Buffer values, const char* op,
                      std::vector<Tensor> inputs,
                      std::function<void(const TensorImpl&)> backward);

}  // namespace detail

}  // namespace metaformer
