#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace r2t {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data->size()) grad.assign(data->size(), 0.0);
  }
};
}  // namespace detail

// Dense row-major fp64 array with an optional gradient slot. Copies are
// shallow: two Tensor values may refer to the same storage and grad.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data->size(); }

  std::span<const double> data() const { return *impl_->data; }
  std::span<double> mutable_data() { return *impl_->data; }
  const std::vector<double>& values() const { return *impl_->data; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return impl_->grad.size() == impl_->data->size(); }
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Shares storage; fresh, empty gradient slot. Used for per-worker
  // parameter replicas whose gradients are reduced afterwards.
  Tensor alias() const;
  // Deep copy of the values, not attached to any tape.
  Tensor clone() const;
  // Shares storage, never records (requires_grad = false, no grad).
  Tensor detach() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered record of executed primitives. Backward replays the adjoints in
// reverse execution order, each exactly once, then clears the record.
class Tape {
 public:
  using Adjoint = std::function<void()>;

  void record(Adjoint adjoint) { entries_.push_back(std::move(adjoint)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and propagates. Loss must be a scalar.
  void backward(const Tensor& loss);

 private:
  std::vector<Adjoint> entries_;
};

// Installs a tape as the calling thread's active tape for the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording on the calling thread for the scope.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Runs backward on the active tape.
void backward(const Tensor& loss);

// Custom-op hook: if a tape is active and any input requires grad, marks
// `output` as requiring grad and records `adjoint`. Returns whether it
// recorded. The adjoint reads output.impl()->grad and accumulates into the
// inputs' grads (call ensure_grad first).
bool record_op(const Tensor& output, std::initializer_list<const Tensor*> inputs,
               Tape::Adjoint adjoint);
bool record_op(const Tensor& output, const std::vector<Tensor>& inputs,
               Tape::Adjoint adjoint);

}  // namespace r2t
