// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors of doubles with a dynamically recorded
// reverse-mode graph. A Tensor is a cheap shared handle; copying it aliases
// the same node. Every op in ops.hpp produces a new node and, when any input
// requires gradients, records a backward closure over its inputs.
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sparsedet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }
  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable view of a leaf's storage (parameter updates, test perturbations).
  // Throws ContractError on non-leaf nodes.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  bool has_grad() const;
  // Gradient buffer; zeros of the right size when backward never reached it.
  std::vector<double> grad() const;
  void zero_grad();

  // A leaf sharing no graph with this tensor: same values, no history.
  Tensor detach() const;

  // Reverse sweep from a scalar. Non-leaf gradients are recomputed from
  // zero on each call; leaf gradients accumulate across calls.
  void backward() const;

  // Internal: used by op implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

using BackwardFn = std::function<void(Node&)>;

// Builds an op result. The closure is recorded only when some input
// requires gradients; otherwise the result is a plain constant.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs, BackwardFn backward);

}  // namespace detail

// A named trainable tensor; the name keys checkpoint records.
struct Parameter {
  std::string name;
  Tensor tensor;
};

}  // namespace sparsedet
