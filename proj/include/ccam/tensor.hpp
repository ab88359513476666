#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ccam/errors.hpp"

namespace ccam {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major array with an optional gradient buffer.
///
/// A tensor is a shared handle: copies alias the same storage, which is what
/// lets the autodiff graph accumulate gradients into parameters owned
/// elsewhere. Use clone() for an independent, detached copy.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, bool requires_grad = false)
      : impl_(std::make_shared<Storage>()) {
    check_shape(shape);
    impl_->data.assign(shape_numel(shape), T(0));
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<Storage>()) {
    check_shape(shape);
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

  static BasicTensor full(Shape shape, T v) {
    BasicTensor t(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), v);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i < 0 ? rank() + i : i)]; }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }

  /// Allocates (zero-filled) if absent and returns the gradient buffer.
  /// Const because a handle does not own its storage: backward closures hold
  /// const copies of their inputs and still accumulate into them.
  std::span<T> grad_buffer() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }

  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }
  void clear_grad() { impl_->grad.clear(); }

  BasicTensor clone() const {
    BasicTensor t(impl_->shape, impl_->data, impl_->requires_grad);
    return t;
  }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> v(impl_->data.begin(), impl_->data.end());
    return BasicTensor<U>(impl_->shape, std::move(v), impl_->requires_grad);
  }

  bool same_storage(const BasicTensor& o) const { return impl_ == o.impl_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  static void check_shape(const Shape& shape) {
    for (int d : shape) {
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    }
  }

  std::shared_ptr<Storage> impl_;
};

using Tensor = BasicTensor<float>;

/// Define-by-run tape. Operations append a backward closure as they execute;
/// backward() replays the closures in exact reverse order. A graph is used
/// for one forward/backward pass and must not be shared across threads.
class Graph {
 public:
  Graph() = default;
  /// A graph that records nothing; used for evaluation-only forward passes.
  static Graph inference() {
    Graph g;
    g.recording_ = false;
    return g;
  }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  void record(const char* op, std::function<void()> backward_fn) {
    if (consumed_) throw std::logic_error("graph already consumed by backward()");
    if (!recording_) return;
    nodes_.push_back(Node{op, std::move(backward_fn)});
  }

  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::size_t i) const { return nodes_[i].op; }
  bool consumed() const { return consumed_; }
  bool recording() const { return recording_; }

  template <class T>
  void backward(BasicTensor<T> loss) {
    if (consumed_) throw std::logic_error("backward() called twice on the same graph");
    if (loss.numel() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.grad_buffer()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    nodes_.clear();
  }

 private:
  struct Node {
    const char* op;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
  bool recording_ = true;
};

}  // namespace ccam
