#pragma once

// Reverse-accumulation tensor.
//
// A Tensor is a cheap handle onto a shared graph node. Values are written once
// by the op that creates the node and never change afterwards (parameters are
// the exception: the optimizer updates them in place between steps). Nodes
// created from inputs that require gradients remember their parents and a
// backward closure; calling backward() on a scalar walks the graph in reverse
// topological order and accumulates into every node's grad buffer.
//
// Layout is row-major with the channel dimension last, so an H x W x C feature
// map doubles as an (H*W) x C matrix and a token sequence is simply S x C.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pix4cap/core/errors.hpp"

namespace pix4cap::nn {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

// Tensor storage, aligned to Eigen's packet boundary. Eigen peels an
// unaligned head off vectorized reductions, so with plain heap alignment the
// summation order (and the rounded result) would depend on buffer addresses.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Buffer<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
  int cols() const { return shape.empty() ? 1 : shape.back(); }
  int rows() const {
    const int c = cols();
    return c == 0 ? 0 : static_cast<int>(value.size() / static_cast<std::size_t>(c));
  }
};

template <class T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor constant(Shape shape, const std::vector<T>& values) {
    return leaf(std::move(shape), values, false);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_buffer(std::move(shape), Buffer<T>(numel(shape), T(0)), requires_grad);
  }
  static Tensor leaf(Shape shape, const std::vector<T>& values, bool requires_grad) {
    return from_buffer(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad);
  }
  static Tensor from_buffer(Shape shape, Buffer<T> values, bool requires_grad) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + to_string(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const {
    const int r = static_cast<int>(node_->shape.size());
    return node_->shape.at(static_cast<std::size_t>(i < 0 ? r + i : i));
  }
  int rows() const { return node_->rows(); }
  int cols() const { return node_->cols(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  T item() const { return node_->value.at(0); }
  T operator[](std::size_t i) const { return node_->value[i]; }

  // Empty span until a backward pass has touched this node.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  ConstMatMap<T> matrix() const { return {node_->value.data(), rows(), cols()}; }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}
  template <class U, class F>
  friend Tensor<U> make_result(Shape, Buffer<U>, std::initializer_list<Tensor<U>>, F&&);
  template <class U, class F>
  friend Tensor<U> make_result(Shape, Buffer<U>, const std::vector<Tensor<U>>&, F&&);

  std::shared_ptr<Node<T>> node_;
};

// Creates an op output. The closure receives the output node and must add its
// contribution into each parent that requires grad; it is dropped entirely
// when no input needs gradients, so inference builds no graph.
template <class T, class F>
Tensor<T> make_result(Shape shape, Buffer<T> value, const std::vector<Tensor<T>>& inputs,
                      F&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  for (const auto& in : inputs) node->requires_grad = node->requires_grad || in.requires_grad();
  if (node->requires_grad) {
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward_fn = std::forward<F>(backward);
  }
  return Tensor<T>(std::move(node));
}

template <class T, class F>
Tensor<T> make_result(Shape shape, Buffer<T> value, std::initializer_list<Tensor<T>> inputs,
                      F&& backward) {
  return make_result(std::move(shape), std::move(value), std::vector<Tensor<T>>(inputs),
                     std::forward<F>(backward));
}

// Accumulates d(root)/d(node) into every reachable node that requires grad.
template <class T>
void backward(const Tensor<T>& root) {
  if (root.size() != 1) {
    throw ShapeError("backward() needs a scalar root, got " + to_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

}  // namespace pix4cap::nn
