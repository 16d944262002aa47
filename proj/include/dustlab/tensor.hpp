// Copyright 2026 The dustlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dustlab/errors.hpp"

namespace dustlab {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline thread_local bool grad_enabled = true;
inline thread_local bool finite_checks = true;

}  // namespace detail

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty when absent
  bool requires_grad = false;

  // Recorded producer; empty for leaves.
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl&)> backward_fn;

  // Gradient accumulator of this node, allocated on first use.
  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense row-major N-d array with an optional gradient slot.
///
/// Tensor is a shared handle: copies alias the same storage. Operations never
/// modify their inputs, so a tensor is immutable once its producing op returns.
/// Only leaves (parameters) are updated in place, between training steps.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<TensorImpl<T>>()) {
    for (Index e : shape) {
      if (e <= 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
    }
    impl_->data.assign(static_cast<std::size_t>(numel_of(shape)), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<TensorImpl<T>>()) {
    if (numel_of(shape) != static_cast<Index>(data.size())) {
      throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                           to_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  Index rank() const { return static_cast<Index>(impl_->shape.size()); }
  Index numel() const { return static_cast<Index>(impl_->data.size()); }

  Index dim(Index axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) throw DimensionError("axis out of range for " + to_string(shape()));
    return impl_->shape[static_cast<std::size_t>(axis)];
  }

  std::span<const T> data() const { return impl_->data; }
  // Mutable access; only for leaves between steps or freshly built tensors.
  std::span<T> mutable_data() { return impl_->data; }
  const std::vector<T>& vec() const { return impl_->data; }

  T operator[](Index i) const { return impl_->data[static_cast<std::size_t>(i)]; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  Tensor grad_tensor() const {
    return has_grad() ? Tensor(shape(), impl_->grad) : Tensor::zeros(shape());
  }
  void zero_grad() { impl_->grad.clear(); }

  const char* op_name() const { return impl_->op; }

  // Leaf copy without graph history.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  Tensor clone() const { return detach(); }

  /// Reverse-mode sweep from this scalar.
  void backward() const;

  TensorImpl<T>* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl<T>>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

namespace detail {

template <class T>
void check_finite(const char* op, std::span<const T> values) {
  if (!finite_checks) return;
  for (const T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

/// Wraps freshly computed data as an op result, recording the backward closure
/// when gradients are enabled and any input requires them.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                      const char* op, std::function<void(TensorImpl<T>&)> backward) {
  check_finite<T>(op, data);
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor<T>& t) { return t.defined() && t.requires_grad(); });
  if (!any) return out;
  auto* impl = out.impl();
  impl->requires_grad = true;
  impl->op = op;
  for (auto& in : inputs) impl->inputs.push_back(in.impl_ptr());
  impl->backward_fn = std::move(backward);
  return out;
}

/// Gradient accumulator of input i, or an empty span when it needs none.
template <class T>
std::span<T> input_grad(TensorImpl<T>& node, std::size_t i) {
  auto& in = node.inputs[i];
  if (!in || !in->requires_grad) return {};
  return in->grad_buffer();
}

}  // namespace detail

template <class T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw ContractError("backward() requires a scalar, got " + to_string(shape()));
  if (!requires_grad()) return;

  // Tape: post-order DFS yields producers before consumers.
  std::vector<TensorImpl<T>*> tape;
  std::unordered_set<TensorImpl<T>*> seen;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack{{impl_.get(), 0}};
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorImpl<T>* child = node->inputs[next++].get();
      if (child && child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      tape.push_back(node);
      stack.pop_back();
    }
  }

  impl_->grad_buffer()[0] += T(1);
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    TensorImpl<T>* node = *it;
    if (!node->backward_fn || node->grad.empty()) continue;
    node->backward_fn(*node);
    // Interior gradients are not retained.
    if (node != impl_.get()) std::vector<T>().swap(node->grad);
  }
}

/// Deterministic flat-index helpers for row-major layouts.
inline std::vector<Index> strides_of(const Shape& shape) {
  std::vector<Index> s(shape.size(), 1);
  for (Index i = static_cast<Index>(shape.size()) - 2; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
  }
  return s;
}

inline Index normalize_axis(Index axis, Index rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  }
  return axis;
}

}  // namespace dustlab
