#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace shharm::nn {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily by backward()
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents that need it.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// Handle to a node of the computation graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;

  static Var constant(Shape shape, std::vector<T> values);
  static Var parameter(Shape shape, std::vector<T> values);
  static Var zeros(Shape shape, bool requires_grad = false);

  // Result of an op; requires_grad is inherited from the parents.
  static Var from_op(Shape shape, std::vector<T> values, std::vector<Var> parents,
                     std::function<void(Node<T>&)> backward_fn);

  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t size() const { return node_->value.size(); }
  std::span<const T> value() const { return node_->value; }
  std::span<T> mutable_value() { return node_->value; }
  // Empty until backward() has reached this node.
  std::span<const T> grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  T item() const { return node_->value.at(0); }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Reverse-mode accumulation from a scalar. Throws if the graph already ran
// backward and was not reset.
template <typename T>
void backward(const Var<T>& loss);

// Clears accumulated gradients and the backward marker of the whole graph.
template <typename T>
void reset_graph(const Var<T>& loss);

}  // namespace shharm::nn
