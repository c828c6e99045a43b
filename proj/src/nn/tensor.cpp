#include "shharm/nn/tensor.hpp"

#include <unordered_set>

#include "shharm/error.hpp"

namespace shharm::nn {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ValidationError("negative dimension in shape " + to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

template <typename T>
Var<T> Var<T>::constant(Shape shape, std::vector<T> values) {
  if (numel(shape) != values.size())
    throw ValidationError("value count " + std::to_string(values.size()) + " does not match shape " + to_string(shape));
  Var v;
  v.node_ = std::make_shared<Node<T>>();
  v.node_->shape = std::move(shape);
  v.node_->value = std::move(values);
  return v;
}

template <typename T>
Var<T> Var<T>::parameter(Shape shape, std::vector<T> values) {
  Var v = constant(std::move(shape), std::move(values));
  v.node_->requires_grad = true;
  return v;
}

template <typename T>
Var<T> Var<T>::zeros(Shape shape, bool requires_grad) {
  const auto n = numel(shape);
  Var v = constant(std::move(shape), std::vector<T>(n, T(0)));
  v.node_->requires_grad = requires_grad;
  return v;
}

template <typename T>
Var<T> Var<T>::from_op(Shape shape, std::vector<T> values, std::vector<Var> parents,
                       std::function<void(Node<T>&)> backward_fn) {
  Var v = constant(std::move(shape), std::move(values));
  for (const auto& p : parents) {
    if (p.requires_grad()) v.node_->requires_grad = true;
  }
  if (v.node_->requires_grad) {
    for (auto& p : parents) v.node_->parents.push_back(p.node_);
    v.node_->backward_fn = std::move(backward_fn);
  }
  return v;
}

namespace {

template <typename T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS; parents precede children in `order`.
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

template <typename T>
void backward(const Var<T>& loss) {
  Node<T>& root = loss.node();
  if (root.value.size() != 1) throw ValidationError("backward() needs a scalar loss, got shape " + to_string(root.shape));
  if (!root.requires_grad) throw ValidationError("loss is not connected to any parameter");
  if (root.backward_done) throw ValidationError("backward() already ran on this graph; reset it first");
  const auto order = topological_order(&root);
  for (Node<T>* n : order) n->ensure_grad();
  root.grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
  root.backward_done = true;
}

template <typename T>
void reset_graph(const Var<T>& loss) {
  for (Node<T>* n : topological_order(&loss.node())) {
    n->grad.clear();
    n->backward_done = false;
  }
}

template class Var<float>;
template class Var<double>;
template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);
template void reset_graph<float>(const Var<float>&);
template void reset_graph<double>(const Var<double>&);

}  // namespace shharm::nn
