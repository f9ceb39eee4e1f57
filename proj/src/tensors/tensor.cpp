#include "pptrn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "pptrn/errors.hpp"

namespace pptrn {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
T* TensorNode<T>::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), T(0));
  return grad.data();
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = numel(shape);
  return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                         " values");
  }
  for (const T& v : data) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in tensor data");
  }
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return node_->shape[axis];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->is_leaf) throw ContractViolation(std::string("in-place write to non-leaf tensor (") + node_->op + ")");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch for " + shape_str(shape()));
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw DimensionError("index out of range for " + shape_str(shape()));
    offset = offset * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[offset];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  if (!node_->is_leaf) throw ContractViolation("requires_grad can only be set on leaf tensors");
  node_->requires_grad = value;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto out = detach();
  out.node_->requires_grad = node_->requires_grad && node_->is_leaf;
  return out;
}

namespace {

template <typename T>
std::vector<TensorNode<T>*> topo_order(TensorNode<T>* root) {
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> visited;
  // Iterative post-order DFS; deep graphs would overflow a recursive walk.
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

template <typename T>
void Tensor<T>::backward() const {
  if (size() != 1) throw DimensionError("backward() needs a scalar loss, got " + shape_str(shape()));
  if (!node_->requires_grad) throw ContractViolation("backward() on a tensor without gradient history");

  auto order = topo_order(node_.get());
  for (auto* n : order) {
    if (!n->is_leaf) n->grad.assign(n->data.size(), T(0));
  }
  node_->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
  for (auto* n : order) {
    if (!n->is_leaf) continue;
    T probe = T(0);
    const T* g = n->grad.data();
    const std::size_t len = n->grad.size();
#pragma omp simd reduction(+ : probe)
    for (std::size_t i = 0; i < len; ++i) probe += g[i] * T(0);
    if (probe != T(0)) throw NumericError("non-finite gradient reached a leaf tensor");
  }
}

template <typename T>
std::size_t graph_size(const Tensor<T>& root) {
  if (!root.requires_grad()) return 0;
  return topo_order(root.node()).size();
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> out(x.data().begin(), x.data().end());
  return Tensor<To>::from_data(x.shape(), std::move(out), x.requires_grad() && x.is_leaf());
}

template struct TensorNode<float>;
template struct TensorNode<double>;
template class Tensor<float>;
template class Tensor<double>;
template std::size_t graph_size(const Tensor<float>&);
template std::size_t graph_size(const Tensor<double>&);
template Tensor<float> cast(const Tensor<double>&);
template Tensor<double> cast(const Tensor<float>&);
template Tensor<float> cast(const Tensor<float>&);
template Tensor<double> cast(const Tensor<double>&);

}  // namespace pptrn
