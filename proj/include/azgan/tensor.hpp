#pragma once

#include <Eigen/Core>

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace azgan {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Storage shared between a Tensor handle and the tape that recorded it.
struct TensorNode {
  Shape shape;
  Eigen::VectorXd value;
  Eigen::VectorXd grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool tracked = false;  // requires_grad itself, or computed from one on a tape

  void accumulate_grad(const Eigen::Ref<const Eigen::VectorXd>& g);
  Eigen::VectorXd& ensure_grad();
};

/// Dense row-major n-d array of doubles with an optional gradient.
///
/// A Tensor is a handle: copies share storage. Use clone() for a deep copy.
/// Image tensors are laid out (batch, channels, height, width).
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, Eigen::VectorXd values, bool requires_grad = false);

  static Tensor from(Shape shape, std::initializer_list<double> values,
                     bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  Index numel() const { return node_->value.size(); }

  Eigen::VectorXd& values() { return node_->value; }
  const Eigen::VectorXd& values() const { return node_->value; }
  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }
  double operator[](Index i) const { return node_->value[i]; }
  double& operator[](Index i) { return node_->value[i]; }

  /// Scalar value of a single-element tensor.
  double item() const;

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  Eigen::VectorXd& grad();
  const Eigen::VectorXd& grad() const;
  /// Sets the gradient to zeros (allocating it if absent).
  void zero_grad();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool tracked() const { return node_->tracked; }

  Tensor clone() const;
  /// Copy of the values without gradient tracking.
  Tensor detach() const;
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<TensorNode>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<TensorNode> node);

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Ordered record of differentiable operations.
///
/// Operations are appended in execution order, so the record is already
/// topologically sorted; backward() walks it once in reverse. A tape built
/// with recording disabled executes forwards without keeping anything.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }

  /// True when an output computed from `inputs` must be recorded.
  bool wants(std::initializer_list<const Tensor*> inputs) const;

  /// Appends an operation. `rule` reads output.grad and accumulates into the
  /// inputs' gradients.
  void record(std::string name, const Tensor& output, std::function<void()> rule);

  /// Populates gradients of every tracked tensor reachable from `loss`.
  /// Intermediate gradients are reset first, so replaying the same tape gives
  /// identical results; leaf gradients accumulate.
  void backward(const Tensor& loss);

  void clear() { entries_.clear(); }

  std::vector<std::string> op_names() const;

 private:
  struct Entry {
    std::string name;
    std::shared_ptr<TensorNode> output;
    std::function<void()> rule;
  };
  bool recording_ = true;
  std::vector<Entry> entries_;
};

/// A learnable or buffered tensor with a stable name used by checkpoints.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<NamedTensor>;

}  // namespace azgan
