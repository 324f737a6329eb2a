// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "biomamba/error.hpp"

namespace biomamba {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// When set, every op checks its output for NaN/Inf and throws NumericError.
inline std::atomic<bool>& debug_finite_checks() {
  static std::atomic<bool> flag{false};
  return flag;
}

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;
  bool leaf = true;

  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// Dense row-major tensor with shared storage. Copies alias the same node, so
// parameters can be handed around by value while the optimizer updates them
// in place.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    validate_shape(shape);
    auto node = std::make_shared<Node>();
    node->data.assign(shape_numel(shape), T(0));
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    validate_shape(shape);
    if (shape_numel(shape) != values.size())
      throw DimensionError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                           shape_str(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows, bool requires_grad = false) {
    std::vector<T> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), r.begin(), r.end());
    }
    return from({rows.size(), cols}, std::move(values), requires_grad);
  }

  static Tensor vector(std::initializer_list<T> values, bool requires_grad = false) {
    return from({values.size()}, std::vector<T>(values), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) { return from({1}, {value}, requires_grad); }

  explicit operator bool() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  // 2-D helpers; rank-1 tensors read as a single row.
  std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const T> data() const { return node_->data; }
  // Mutation is reserved for parameter updates and initialization.
  std::span<T> mutable_data() { return node_->data; }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->leaf; }
  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Detached copy with fresh storage.
  Tensor clone() const { return from(shape(), node_->data, false); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }

  std::shared_ptr<Node> node_;
};

// Ordered record of differentiable ops. Ops append while a TapeScope for the
// tape is active on the current thread; entries are in execution order, so
// every entry's inputs were produced before it.
template <class T>
class Tape {
 public:
  using Node = TensorNode<T>;
  struct Entry {
    std::shared_ptr<Node> output;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void()> backward;
  };

  void push(Entry e) { entries_.push_back(std::move(e)); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  // Propagates d(loss)/d(.) to every requires_grad leaf. Leaf gradients
  // accumulate across calls; intermediate gradients are reset first, so two
  // calls on the same tape add the leaf gradients twice.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    const auto& root = loss.node();
    bool reachable = false;
    for (auto& e : entries_) {
      e.output->grad.assign(e.output->data.size(), T(0));
      reachable = reachable || e.output == root;
    }
    if (!reachable) {
      if (root->leaf && root->requires_grad) {
        root->grad_buffer()[0] += T(1);
        return;
      }
      throw ContractError("backward(): loss was not produced on this tape");
    }
    root->grad[0] = T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  }

 private:
  std::vector<Entry> entries_;
};

namespace detail {
template <class T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}
}  // namespace detail

// Activates recording into `tape` on this thread for the scope's lifetime.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(detail::active_tape<T>()) { detail::active_tape<T>() = &tape; }
  ~TapeScope() { detail::active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Suspends recording (e.g. for evaluation inside a training scope).
template <class T>
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape<T>()) { detail::active_tape<T>() = nullptr; }
  ~NoGradScope() { detail::active_tape<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!debug_finite_checks().load(std::memory_order_relaxed)) return;
  for (T v : t.data())
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
}

// Attaches `backward` to `out` when recording and any input needs a gradient.
// The closure receives the output node; it must accumulate into the grad
// buffers of inputs that require grad.
template <class T, class F>
Tensor<T> record(Tensor<T> out, std::initializer_list<Tensor<T>> inputs, const char* op, F&& backward) {
  check_finite(out, op);
  Tape<T>* tape = active_tape<T>();
  if (!tape) return out;
  bool needed = false;
  for (const auto& in : inputs) needed = needed || in.requires_grad();
  if (!needed) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.leaf = false;
  typename Tape<T>::Entry e;
  e.output = out.node();
  for (const auto& in : inputs) e.inputs.push_back(in.node());
  e.backward = [fn = std::forward<F>(backward), outp = out.node().get()]() {
    if (!outp->grad.empty()) fn(*outp);
  };
  tape->push(std::move(e));
  return out;
}

// Grad buffer of an input if it participates in differentiation, else null.
template <class T>
T* grad_of(const Tensor<T>& t) {
  return t.requires_grad() ? t.node()->grad_buffer().data() : nullptr;
}

}  // namespace detail

}  // namespace biomamba
