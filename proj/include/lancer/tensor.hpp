#pragma once

// Dense row-major tensors with a dynamic reverse-mode tape.
//
// Every op result keeps handles to its inputs plus a closure that pushes the
// result's gradient into them. backward() walks the graph once in reverse
// topological order. Leaf gradients accumulate across calls until zero_grad().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "lancer/error.hpp"

namespace lancer {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::vector<T> grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data->size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    for (auto e : shape)
      if (e == 0) fail(ErrorKind::dimension, "tensor extent must be positive, got " + shape_str(shape));
    node_->data = std::make_shared<std::vector<T>>(numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (numel(shape) != values.size())
      fail(ErrorKind::dimension, "shape " + shape_str(shape) + " does not hold " +
                                     std::to_string(values.size()) + " values");
    node_->data = std::make_shared<std::vector<T>>(std::move(values));
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, std::vector<T>{v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data->size(); }
  std::size_t rows() const { return node_->shape.size() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const T> values() const { return *node_->data; }
  std::span<T> mutable_values() { return *node_->data; }
  T item() const { return (*node_->data)[0]; }
  T at(std::size_t r, std::size_t c) const { return (*node_->data)[r * cols() + c]; }
  T operator[](std::size_t i) const { return (*node_->data)[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  bool all_finite() const {
    return std::all_of(node_->data->begin(), node_->data->end(), [](T v) { return std::isfinite(v); });
  }

  /// New leaf sharing this tensor's storage but owning a fresh gradient.
  /// Lets worker threads backpropagate into private buffers.
  Tensor alias() const {
    Tensor t;
    t.node_ = std::make_shared<Node<T>>();
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  /// Deep copy as a fresh leaf.
  Tensor clone() const {
    return Tensor(node_->shape, std::vector<T>(node_->data->begin(), node_->data->end()), node_->requires_grad);
  }

  /// Same values as an untracked leaf.
  Tensor detach() const {
    Tensor t = alias();
    t.node_->requires_grad = false;
    return t;
  }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape(), std::vector<U>(node_->data->begin(), node_->data->end()), false);
  }

  /// Builds an op result; records parents only if recording is on and any
  /// input is tracked.
  static Tensor make_result(Shape shape, std::vector<T> values, std::vector<std::shared_ptr<Node<T>>> parents,
                            std::function<void(Node<T>&)> backward_fn) {
    Tensor out(std::move(shape), std::move(values));
    bool track = grad_enabled() &&
                 std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
    if (track) {
      out.node_->requires_grad = true;
      out.node_->parents = std::move(parents);
      out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Reverse pass from a scalar loss. Each node's closure runs once, after all
/// of its consumers have contributed.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1)
    fail(ErrorKind::dimension, "backward needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{&loss.node(), 0}};
  seen.insert(&loss.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node().ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

}  // namespace lancer
