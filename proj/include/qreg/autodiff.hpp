#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "qreg/tensor.hpp"

namespace qreg {

class Node;

namespace detail {

struct NodeImpl {
  Tensor value;
  Tensor grad;
  bool grad_written = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<NodeImpl>> parents;
  // Reads `self.grad` and accumulates into the parents' gradients.
  std::function<void(NodeImpl& self)> backward_rule;
  std::string name;
};

}  // namespace detail

/// Handle to a vertex of the reverse-mode graph. Copies share the vertex.
///
/// The value of a node is fixed once created. Leaves that represent trainable
/// parameters are the only exception: optimizers update them in place through
/// `mutable_value()` between graph constructions.
class Node {
 public:
  Node() = default;

  static Node leaf(Tensor value, bool requires_grad = false, std::string name = {});
  static Node constant(Tensor value) { return leaf(std::move(value), false); }

  bool valid() const noexcept { return impl_ != nullptr; }
  const Tensor& value() const { return impl_->value; }
  Tensor& mutable_value() { return impl_->value; }
  const Shape& shape() const { return impl_->value.shape(); }

  /// Accumulated gradient; zeros until backward writes into it.
  const Tensor& grad() const { return impl_->grad; }
  bool has_grad() const { return impl_->grad_written; }
  void zero_grad();

  bool requires_grad() const { return impl_->requires_grad; }
  const std::string& name() const { return impl_->name; }
  void set_name(std::string name) { impl_->name = std::move(name); }

  /// Number of direct inputs of this vertex.
  std::size_t num_parents() const { return impl_->parents.size(); }

  bool same_as(const Node& other) const noexcept { return impl_ == other.impl_; }

  // Builds an interior vertex. `rule` may be empty for non-differentiable
  // results. The result requires a gradient iff some parent does.
  static Node make(Tensor value, std::vector<Node> parents,
                   std::function<void(detail::NodeImpl&)> rule);

  detail::NodeImpl& impl() const { return *impl_; }

 private:
  explicit Node(std::shared_ptr<detail::NodeImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::NodeImpl> impl_;
};

namespace detail {
/// Gradient buffer of `node`, zero-filled on first use.
Tensor& grad_slot(NodeImpl& node);
/// Adds `g` into the gradient of `node`. The first write copies `g` verbatim.
void accumulate_grad(NodeImpl& node, const Tensor& g);
}  // namespace detail

// ---------------------------------------------------------------------------
// Operations. All throw DimensionError on incompatible shapes.

/// [m×k]·[k×n] -> [m×n].
Node matmul(const Node& a, const Node& b);
/// 2-D transpose.
Node transpose(const Node& a);
/// Fully connected layer: x [N×in], w [out×in], optional bias [out] -> [N×out].
Node linear(const Node& x, const Node& w, const Node* bias = nullptr);

/// Cross-correlation of x [N×C×H×W] with w [F×C×kh×kw].
Node conv2d(const Node& x, const Node& w, std::size_t stride = 1, std::size_t padding = 0);
/// Adds b [C] to every spatial position of channel c of x [N×C×H×W].
Node add_channel_bias(const Node& x, const Node& b);

// Elementwise arithmetic. Operands must have equal shapes, or one operand's
// shape (ignoring leading 1s) must equal a suffix of the other's shape.
Node add(const Node& a, const Node& b);
Node sub(const Node& a, const Node& b);
Node mul(const Node& a, const Node& b);
Node scale(const Node& a, double factor);

Node relu(const Node& a);
Node sigmoid(const Node& a);
Node exp(const Node& a);
/// Throws DomainError if any input is <= 0.
Node log(const Node& a);
/// Gradient passes where lo <= x <= hi.
Node clamp(const Node& a, double lo, double hi);

/// Sum of all entries, shape [].
Node sum(const Node& a);
/// Mean of all entries, shape [].
Node mean(const Node& a);
Node reshape(const Node& a, Shape shape);

/// Applies `forward` to the value and passes the upstream gradient to the
/// input unchanged (straight-through). Throws DimensionError if `forward`
/// changes the shape.
Node custom_grad(const Node& input, const std::function<Tensor(const Tensor&)>& forward);

/// Reverse sweep from a scalar loss (shape [] or [1]). Gradients accumulate
/// into every reachable node that requires one. Throws ContractError for a
/// non-scalar loss.
void backward(const Node& loss);

}  // namespace qreg
