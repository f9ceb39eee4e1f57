#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pptrn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  // Empty until the first gradient reaches this node.
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads this node's grad and accumulates into inputs that require grad.
  std::function<void(TensorNode&)> backward_fn;

  T* ensure_grad();
};

// Handle to a node of the dynamic op graph. Copies share the node. Values are
// immutable once built; only leaf data (parameters) may be rewritten in place
// by an optimizer, and grads accumulate.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Leaf-only in-place access (initialisation, optimizer updates).
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value);
  bool is_leaf() const { return node_->is_leaf; }
  const char* op_name() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->ensure_grad(), node_->data.size()}; }
  void zero_grad() { node_->grad.clear(); }

  // Reverse-mode sweep from a scalar. Leaf grads accumulate across calls;
  // interior grads are recomputed each call.
  void backward() const;

  // Same values, no history.
  Tensor detach() const;
  Tensor clone() const;

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Number of nodes reachable from `root` that carry history.
template <typename T>
std::size_t graph_size(const Tensor<T>& root);

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x);

extern template struct TensorNode<float>;
extern template struct TensorNode<double>;
extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace pptrn
