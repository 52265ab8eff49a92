#include "r2t/tensor.hpp"

#include <sstream>

#include "r2t/errors.hpp"

namespace r2t {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto d : shape) {
    if (d == 0) throw ContractViolation("tensor: zero-sized dimension in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ContractViolation("tensor: shape " + shape_str(shape) + " does not match " +
                            std::to_string(values.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::make_shared<std::vector<double>>(std::move(values));
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw IndexError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractViolation("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return (*impl_->data)[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ContractViolation("at: index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= impl_->shape[axis]) throw IndexError("at: index out of range");
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return (*impl_->data)[flat];
}

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractViolation("grad: tensor has no gradient");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  impl_->ensure_grad();
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::alias() const {
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->data;
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

Tensor Tensor::clone() const { return Tensor(shape(), values(), false); }

Tensor Tensor::detach() const {
  Tensor t = alias();
  t.impl_->requires_grad = false;
  return t;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractViolation("backward: loss must be a scalar, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss) {
  if (g_active_tape == nullptr) throw ContractViolation("backward: no active tape");
  g_active_tape->backward(loss);
}

bool record_op(const Tensor& output, std::initializer_list<const Tensor*> inputs,
               Tape::Adjoint adjoint) {
  if (g_active_tape == nullptr) return false;
  bool any = false;
  for (const Tensor* t : inputs) any = any || (t->defined() && t->requires_grad());
  if (!any) return false;
  output.impl()->requires_grad = true;
  g_active_tape->record(std::move(adjoint));
  return true;
}

bool record_op(const Tensor& output, const std::vector<Tensor>& inputs, Tape::Adjoint adjoint) {
  if (g_active_tape == nullptr) return false;
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (!any) return false;
  output.impl()->requires_grad = true;
  g_active_tape->record(std::move(adjoint));
  return true;
}

}  // namespace r2t
