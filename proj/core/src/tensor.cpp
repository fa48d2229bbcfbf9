#include "metaformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <cstring>
#include <utility>

namespace metaformer {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor::Tensor(Shape shape, bool requires_grad) {
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->data.assign(static_cast<std::size_t>(numel_of(shape)), scalar(0));
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, Buffer values, bool requires_grad) {
  if (numel_of(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError(detail::cat("tensor init: shape ", shape_str(shape),
                                 " wants ", numel_of(shape), " values, got ",
                                 values.size()));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, const std::vector<scalar>& values,
               bool requires_grad)
    : Tensor(std::move(shape), Buffer(values.begin(), values.end()),
             requires_grad) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(std::move(shape), requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), scalar(1), requires_grad);
}

Tensor Tensor::full(Shape shape, scalar value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::scalar_value(scalar value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, scalar stddev, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  for (auto& v : t.impl_->data) v = static_cast<scalar>(rng.normal()) * stddev;
  return t;
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, scalar lo, scalar hi,
                            bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  for (auto& v : t.impl_->data)
    v = static_cast<scalar>(rng.uniform(static_cast<double>(lo),
                                        static_cast<double>(hi)));
  return t;
}

std::span<const scalar> Tensor::grad() const {
  if (!impl_->requires_grad) {
    throw ContractError("grad() on a tensor that does not require grad");
  }
  impl_->ensure_grad();
  return impl_->grad;
}

scalar Tensor::item() const {
  if (numel() != 1) {
    throw ContractError(detail::cat("item() needs exactly one element, shape is ",
                                    shape_str(shape())));
  }
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool value) {
  if (value && impl_->producer) {
    throw ContractError("requires_grad can only be toggled on leaf tensors");
  }
  impl_->requires_grad = value;
  return *this;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) {
    std::fill(impl_->grad.begin(), impl_->grad.end(), scalar(0));
  }
  impl_->backward_done = false;
}

Tensor Tensor::detach() const {
  auto copy = std::make_shared<detail::TensorImpl>();
  copy->shape = impl_->shape;
  copy->data = impl_->data;
  copy->requires_grad = false;
  return Tensor(std::move(copy));
}

void Tensor::backward() {
  if (numel() != 1) {
    throw ContractError(detail::cat("backward() requires a scalar loss, got ",
                                    shape_str(shape())));
  }
  if (impl_->backward_done) {
    throw ContractError(
        "backward() called twice on the same graph without reset");
  }
  ComputationGraph::trace(*this).run_backward();
  impl_->backward_done = true;
}

ComputationGraph ComputationGraph::trace(const Tensor& root) {
  ComputationGraph g;
  g.root_ = root.impl();

  // Iterative post-order DFS over producer edges. The graph owns the nodes
  // it visits; tape records may be the only owners of intermediates.
  std::unordered_set<const detail::TensorImpl*> visited;
  struct Frame {
    std::shared_ptr<detail::TensorImpl> node;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  if (root.impl()->producer) {
    stack.push_back({root.impl(), 0});
    visited.insert(root.impl().get());
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    auto& producer = f.node->producer;
    if (!producer || f.next_input == producer->inputs.size()) {
      g.order_.push_back(f.node);
      stack.pop_back();
      continue;
    }
    const std::shared_ptr<detail::TensorImpl>& in =
        producer->inputs[f.next_input++];
    if (in->producer && !visited.count(in.get())) {
      visited.insert(in.get());
      stack.push_back({in, 0});
    }
  }
  return g;
}

void ComputationGraph::run_backward() {
  root_->ensure_grad();
  std::fill(root_->grad.begin(), root_->grad.end(), scalar(1));

  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    const std::shared_ptr<detail::TensorImpl>& node = *it;
    auto producer = node->producer;
    if (!producer) continue;
    if (!producer->backward) {
      throw ContractError(
          "graph record already consumed; rebuild the forward pass");
    }
    node->ensure_grad();
    producer->backward(*node);
    // Release the record: frees saved intermediates and makes accidental
    // re-drive of a consumed tape impossible.
    producer->backward = nullptr;
    producer->inputs.clear();
    node->producer = nullptr;
  }
}

namespace detail {

Tensor make_op_output(Shape shape, Buffer values, const char* op,
                      std::vector<Tensor> inputs,
                      std::function<void(const TensorImpl&)> backward) {
  bool need_grad = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) {
      if (in.defined() && in.impl()->requires_grad) {
        need_grad = true;
        break;
      }
    }
  }
  Tensor out(std::move(shape), std::move(values), false);
  if (need_grad) {
    out.impl()->requires_grad = true;
    auto node = std::make_shared<OpNode>();
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    out.impl()->producer = std::move(node);
  }
  return out;
}

}  // namespace detail

}  // namespace metaformer
