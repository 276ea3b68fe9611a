#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddl {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string to_string(const Shape& shape);
Index numel(const Shape& shape);
Shape contiguous_strides(const Shape& shape);
Index normalize_axis(Index axis, Index ndim);

/// When enabled, every op rejects non-finite inputs with NonFiniteError.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

class Tape;

namespace detail {

struct Node {
  virtual ~Node() = default;
  virtual void clear_grad() = 0;
  virtual bool has_grad() const = 0;

  bool requires_grad = false;
  Tape* tape = nullptr;
  std::int64_t tape_id = -1;
};

template <typename Scalar>
struct TensorNode final : Node {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Array data;
  Array grad;

  void clear_grad() override { grad.resize(0); }
  bool has_grad() const override { return grad.size() != 0 && grad.size() == data.size(); }

  Array& ensure_grad() {
    if (grad.size() != data.size()) grad = Array::Zero(data.size());
    return grad;
  }
};

}  // namespace detail

/// Ordered record of differentiable operations for one forward pass.
///
/// Ops record onto the tape made active by a TapeScope on the calling thread
/// whenever at least one operand requires a gradient. Backward replays the
/// entries in reverse order; each entry runs at most once per call.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::vector<std::shared_ptr<detail::Node>> inputs,
              std::shared_ptr<detail::Node> output, BackwardFn backward);

  std::size_t size() const { return entries_.size(); }

  /// Runs the recorded backward rules from entry `last` down to entry 0.
  /// Intermediate gradients are reset first so repeated calls only
  /// accumulate into leaves.
  void replay(std::int64_t last);

  static Tape* active();

 private:
  struct Entry {
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::shared_ptr<detail::Node> output;
    BackwardFn backward;
  };

  std::vector<Entry> entries_;
};

/// Makes `tape` the active tape for the current thread for this scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using Node = detail::TensorNode<Scalar>;

  Tensor();
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Array data);
  Tensor(Shape shape, std::initializer_list<Scalar> values);

  static Tensor zeros(Shape shape);
  /// Values are unspecified; for outputs that are fully overwritten.
  static Tensor empty(Shape shape);
  static Tensor full(Shape shape, Scalar value);
  static Tensor scalar(Scalar value);
  /// Leaf tensor that accumulates gradient.
  static Tensor parameter(Shape shape, Array data);

  const Shape& shape() const { return node_->shape; }
  Index ndim() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const;
  Index size() const { return node_->data.size(); }

  const Array& data() const { return node_->data; }
  /// In-place access for optimizers and initializers. Never use on a tensor
  /// that is an intermediate of a live tape.
  Array& mutable_data() { return node_->data; }

  Scalar item() const;
  Scalar at(std::initializer_list<Index> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool value);
  bool on_tape() const { return node_->tape != nullptr; }

  bool has_grad() const { return node_->has_grad(); }
  /// Gradient buffer; zeros when nothing has been accumulated.
  Array grad() const;
  Array& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->clear_grad(); }

  /// Copy of the values with no tape participation.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse sweep from a scalar-shaped loss. Leaf gradients accumulate across
/// calls until zero_grad().
template <typename Scalar>
void backward(const Tensor<Scalar>& loss);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ddl
