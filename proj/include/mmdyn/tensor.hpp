#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmdyn/errors.hpp"

namespace mmdyn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something is accumulated into it
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads this node's grad and accumulates into the grads of `inputs`.
  std::function<void(TensorNode&)> backward;
};

/// Dense row-major array with optional reverse-mode gradient tracking.
///
/// Tensor is a handle: copies share storage and graph position. Leaves that
/// require grad are the learnable parameters; every other tensor is the
/// result of an op and is immutable.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  /// Builds an op result. Graph edges are kept only when some input requires
  /// grad. Throws NumericError if any output value is non-finite.
  static Tensor make_result(std::string_view op, Shape shape, std::vector<T> values,
                            std::vector<Tensor> inputs, std::function<void(Node&)> backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  /// Mutable access to a leaf's storage (parameter updates, checkpoint loads).
  std::span<T> mutable_values();

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  T item() const;
  T operator[](std::size_t flat) const { return node_->value[flat]; }

  /// Copy of the values with no graph attached.
  Tensor detach() const;

  bool is_leaf() const { return node_->op == "leaf"; }
  std::string_view op() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

/// Reverse-mode sweep from a single-element tensor. Leaf grads accumulate
/// across calls; intermediate grads are recomputed each call.
template <typename T>
void backward(const Tensor<T>& loss);

/// Throws NumericError naming `what` if any value is NaN or Inf.
template <typename T>
void require_finite(std::span<const T> values, std::string_view what);

}  // namespace mmdyn
