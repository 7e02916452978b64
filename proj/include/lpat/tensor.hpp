#pragma once

// Dense row-major tensors with a reverse-mode compute graph.
//
// Array<T> is a plain value (shape + data). Tensor<T> is a handle onto a
// graph node that owns an immutable Array plus, after backward(), a gradient
// buffer of the same length. Nodes are numbered in creation order, so sorting
// reachable nodes by id yields the forward execution order.

#include <algorithm>
#include <atomic>
#include <cstddef>
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

#include "lpat/error.hpp"

namespace lpat {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct Array {
  Shape shape;
  std::vector<T> data;

  Array() = default;

  explicit Array(Shape s, T fill = T{0}) : shape(std::move(s)), data(numel(shape), fill) {
    check_dims();
  }

  Array(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    check_dims();
    if (data.size() != numel(shape)) {
      throw DimensionError("array data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
  }

  static Array scalar(T v) { return Array(Shape{1}, std::vector<T>{v}); }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  T& at(std::size_t a, std::size_t b, std::size_t c) { return data[(a * shape[1] + b) * shape[2] + c]; }
  const T& at(std::size_t a, std::size_t b, std::size_t c) const {
    return data[(a * shape[1] + b) * shape[2] + c];
  }

  template <typename U>
  Array<U> cast() const {
    return Array<U>(shape, std::vector<U>(data.begin(), data.end()));
  }

  friend bool operator==(const Array& a, const Array& b) = default;

 private:
  void check_dims() const {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("shape " + shape_str(shape) + " has a zero dimension");
    }
  }
};

/// Process-wide settings for primitive kernels.
namespace runtime {
inline std::atomic<std::size_t>& thread_slot() {
  static std::atomic<std::size_t> threads{1};
  return threads;
}
inline std::size_t threads() { return thread_slot().load(); }
inline void set_threads(std::size_t n) { thread_slot().store(n == 0 ? 1 : n); }
}  // namespace runtime

template <typename T>
class Tensor;

namespace detail {

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
struct Node;

/// Gradient accumulation targets handed to a backward closure, one per
/// parent; null where the parent does not require a gradient.
template <typename T>
using GradSinks = std::vector<std::vector<T>*>;

template <typename T>
using BackwardFn = std::function<void(const std::vector<T>& grad_out, GradSinks<T>& sinks)>;

template <typename T>
struct Node {
  std::uint64_t id = next_node_id();
  const char* op = "leaf";
  Array<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn<T> backward;
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  /// Trainable input of the graph.
  static Tensor leaf(Array<T> value) { return make_input(std::move(value), true); }

  /// Input that never receives a gradient.
  static Tensor constant(Array<T> value) { return make_input(std::move(value), false); }

  /// Records an operation. The backward closure is kept only when some
  /// parent requires a gradient.
  static Tensor record(const char* op, Array<T> value, std::vector<Tensor> parents,
                       detail::BackwardFn<T> backward) {
    auto node = std::make_shared<detail::Node<T>>();
    node->op = op;
    node->value = std::move(value);
    for (auto& p : parents) {
      node->requires_grad = node->requires_grad || p.requires_grad();
      node->parents.push_back(p.node_);
    }
    if (node->requires_grad) node->backward = std::move(backward);
    return Tensor(std::move(node));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Array<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t dim(std::size_t i) const { return node_->value.shape.at(i); }
  std::size_t rank() const { return node_->value.shape.size(); }
  std::size_t size() const { return node_->value.data.size(); }
  std::span<const T> data() const { return node_->value.data; }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }
  std::uint64_t id() const { return node_->id; }

  T item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value.data[0];
  }

  bool has_grad() const { return !node_->grad.empty(); }

  /// Gradient from the last backward() pass; zeros if the node was not reached.
  Array<T> grad() const {
    if (node_->grad.empty()) return Array<T>(shape());
    return Array<T>(shape(), node_->grad);
  }

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

  detail::Node<T>* node() const noexcept { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node<T>> n) : node_(std::move(n)) {}

  static Tensor make_input(Array<T> value, bool requires_grad) {
    auto node = std::make_shared<detail::Node<T>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  std::shared_ptr<detail::Node<T>> node_;
};

/// Ordered record of the operations reachable from a root, in forward
/// execution order.
template <typename T>
class Graph {
 public:
  static Graph trace(const Tensor<T>& root) {
    Graph g;
    std::unordered_set<const detail::Node<T>*> seen;
    std::vector<detail::Node<T>*> stack{root.node()};
    while (!stack.empty()) {
      auto* n = stack.back();
      stack.pop_back();
      if (!seen.insert(n).second) continue;
      g.nodes_.push_back(n);
      for (auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(g.nodes_.begin(), g.nodes_.end(),
              [](const auto* a, const auto* b) { return a->id < b->id; });
    return g;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  std::vector<std::string> ops() const {
    std::vector<std::string> out;
    out.reserve(nodes_.size());
    for (auto* n : nodes_) out.emplace_back(n->op);
    return out;
  }

  const std::vector<detail::Node<T>*>& nodes() const noexcept { return nodes_; }

 private:
  std::vector<detail::Node<T>*> nodes_;
};

/// Reverse-mode accumulation from a scalar loss. Gradients of every reached
/// node are reset first, so repeated calls do not accumulate.
template <typename T>
void backward(const Graph<T>& graph, const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  const auto& nodes = graph.nodes();
  if (nodes.empty() || nodes.back() != loss.node()) {
    throw ContractError("loss is not the final node of the supplied graph");
  }
  for (auto* n : nodes) {
    if (n->requires_grad) n->grad.assign(n->value.size(), T{0});
  }
  if (!loss.requires_grad()) return;
  loss.node()->grad[0] = T{1};
  detail::GradSinks<T> sinks;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto* n = *it;
    if (!n->backward) continue;
    sinks.clear();
    for (auto& p : n->parents) sinks.push_back(p->requires_grad ? &p->grad : nullptr);
    n->backward(n->grad, sinks);
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  backward(Graph<T>::trace(loss), loss);
}

}  // namespace lpat
