#include "azgan/tensor.hpp"

#include "azgan/errors.hpp"

#include <sstream>

namespace azgan {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_string(shape));
    n *= e;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void TensorNode::accumulate_grad(const Eigen::Ref<const Eigen::VectorXd>& g) {
  ensure_grad() += g;
}

Eigen::VectorXd& TensorNode::ensure_grad() {
  if (grad.size() != value.size()) grad = Eigen::VectorXd::Zero(value.size());
  return grad;
}

Tensor::Tensor() : node_(std::make_shared<TensorNode>()) {}

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : node_(std::make_shared<TensorNode>()) {
  const Index n = shape_numel(shape);
  node_->shape = std::move(shape);
  node_->value = Eigen::VectorXd::Constant(n, fill);
  node_->requires_grad = requires_grad;
  node_->tracked = requires_grad;
}

Tensor::Tensor(Shape shape, Eigen::VectorXd values, bool requires_grad)
    : node_(std::make_shared<TensorNode>()) {
  const Index n = shape_numel(shape);
  if (values.size() != n) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_string(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
  node_->tracked = requires_grad;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, bool requires_grad) {
  Eigen::VectorXd v(static_cast<Index>(values.size()));
  Index i = 0;
  for (double x : values) v[i++] = x;
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_string(shape()));
  }
  return node_->value[0];
}

Eigen::VectorXd& Tensor::grad() {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

const Eigen::VectorXd& Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad = Eigen::VectorXd::Zero(node_->value.size()); }

void Tensor::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  node_->tracked = flag;
}

Tensor Tensor::clone() const {
  Tensor t(shape(), values(), requires_grad());
  if (has_grad()) t.node_->grad = node_->grad;
  return t;
}

Tensor Tensor::detach() const { return Tensor(shape(), values(), false); }

Tensor Tensor::wrap(std::shared_ptr<TensorNode> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

bool Tape::wants(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  for (const Tensor* t : inputs) {
    if (t != nullptr && t->tracked()) return true;
  }
  return false;
}

void Tape::record(std::string name, const Tensor& output, std::function<void()> rule) {
  output.node()->tracked = true;
  entries_.push_back(Entry{std::move(name), output.node(), std::move(rule)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  bool on_tape = false;
  for (const auto& e : entries_) {
    e.output->grad = Eigen::VectorXd::Zero(e.output->value.size());
    if (e.output == loss.node()) on_tape = true;
  }
  if (!on_tape) throw ContractError("backward: loss was not produced on this tape");
  loss.node()->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->rule();
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.push_back(e.name);
  return names;
}

}  // namespace azgan
