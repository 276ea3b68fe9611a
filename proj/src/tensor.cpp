#include "ddl/tensor.hpp"

#include <atomic>
#include <sstream>

namespace ddl {

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<bool> g_finite_checks{false};

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index s : shape) n *= s;
  return n;
}

Shape contiguous_strides(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (Index i = static_cast<Index>(shape.size()) - 2; i >= 0; --i)
    strides[i] = strides[i + 1] * shape[i + 1];
  return strides;
}

Index normalize_axis(Index axis, Index ndim) {
  Index a = axis < 0 ? axis + ndim : axis;
  if (a < 0 || a >= ndim)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(ndim));
  return a;
}

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

// Tape

Tape::~Tape() {
  for (auto& e : entries_) {
    e.output->tape = nullptr;
    e.output->tape_id = -1;
  }
}

void Tape::record(std::vector<std::shared_ptr<detail::Node>> inputs,
                  std::shared_ptr<detail::Node> output, BackwardFn backward) {
  output->requires_grad = true;
  output->tape = this;
  output->tape_id = static_cast<std::int64_t>(entries_.size());
  entries_.push_back({std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::replay(std::int64_t last) {
  for (std::int64_t i = 0; i < last; ++i) entries_[i].output->clear_grad();
  for (std::int64_t i = last; i >= 0; --i) {
    auto& e = entries_[i];
    // Entries whose output received no gradient are not ancestors of the loss.
    if (e.output->has_grad()) e.backward();
  }
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

// Tensor

template <typename Scalar>
Tensor<Scalar>::Tensor() : node_(std::make_shared<Node>()) {
  node_->shape = {0};
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape) : node_(std::make_shared<Node>()) {
  for (Index s : shape)
    if (s < 0) throw ShapeError("negative extent in shape " + to_string(shape));
  node_->data = Array::Zero(numel(shape));
  node_->shape = std::move(shape);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::empty(Shape shape) {
  for (Index s : shape)
    if (s < 0) throw ShapeError("negative extent in shape " + to_string(shape));
  Tensor t;
  t.node_->data.resize(numel(shape));
  t.node_->shape = std::move(shape);
  return t;
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array data) : node_(std::make_shared<Node>()) {
  if (numel(shape) != data.size())
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + to_string(shape));
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::initializer_list<Scalar> values)
    : Tensor(std::move(shape),
             Eigen::Map<const Array>(values.begin(), static_cast<Index>(values.size()))) {}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Shape shape) {
  return Tensor(std::move(shape));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value) {
  Index n = numel(shape);
  return Tensor(std::move(shape), Array::Constant(n, value));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value) {
  return Tensor(Shape{}, Array::Constant(1, value));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::parameter(Shape shape, Array data) {
  Tensor t(std::move(shape), std::move(data));
  t.node_->requires_grad = true;
  return t;
}

template <typename Scalar>
Index Tensor<Scalar>::dim(Index axis) const {
  return node_->shape[normalize_axis(axis, ndim())];
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->data[0];
}

template <typename Scalar>
Scalar Tensor<Scalar>::at(std::initializer_list<Index> index) const {
  if (static_cast<Index>(index.size()) != ndim())
    throw ShapeError("index rank does not match shape " + to_string(shape()));
  Index flat = 0;
  std::size_t axis = 0;
  for (Index i : index) {
    if (i < 0 || i >= node_->shape[axis])
      throw ShapeError("index out of range for shape " + to_string(shape()));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

template <typename Scalar>
Tensor<Scalar>& Tensor<Scalar>::set_requires_grad(bool value) {
  node_->requires_grad = value;
  return *this;
}

template <typename Scalar>
typename Tensor<Scalar>::Array Tensor<Scalar>::grad() const {
  if (has_grad()) return node_->grad;
  return Array::Zero(size());
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(node_->shape, node_->data);
}

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  auto& node = *loss.node();
  if (node.tape == nullptr) {
    // A leaf loss is its own gradient.
    if (node.requires_grad) node.ensure_grad()[0] += Scalar(1);
    return;
  }
  node.clear_grad();
  node.ensure_grad()[0] = Scalar(1);
  node.tape->replay(node.tape_id);
}

template class Tensor<float>;
template class Tensor<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace ddl
