#include "rtal/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "rtal/errors.hpp"

namespace rtal {

const char* to_string(DType dtype) { return dtype == DType::F64 ? "f64" : "f32"; }

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
void throw_dtype_mismatch(DType have, DType want) {
  throw std::invalid_argument(std::string("tensor dtype is ") + to_string(have) + ", accessed as " +
                              to_string(want));
}
}  // namespace detail

Tensor::Tensor(Shape shape, DType dtype) : impl_(std::make_shared<detail::TensorImpl>()) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
  impl_->dtype = dtype;
  const std::size_t n = rtal::numel(shape);
  impl_->shape = std::move(shape);
  visit_dtype(dtype, [&]<class T>() { impl_->data<T>().assign(n, T(0)); });
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  visit_dtype(dtype, [&]<class T>() { std::fill(t.impl_->data<T>().begin(), t.impl_->data<T>().end(), T(value)); });
  return t;
}

Tensor Tensor::from(Shape shape, const std::vector<double>& values, DType dtype) {
  Tensor t(std::move(shape), dtype);
  if (values.size() != t.numel()) {
    throw ShapeError("tensor of shape " + to_string(t.shape()) + " needs " + std::to_string(t.numel()) +
                     " values, got " + std::to_string(values.size()));
  }
  visit_dtype(dtype, [&]<class T>() { std::copy(values.begin(), values.end(), t.impl_->data<T>().begin()); });
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

const Shape& Tensor::shape() const {
  if (!impl_) throw std::logic_error("undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw IndexError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
  return impl_->shape[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return rtal::numel(shape()); }

DType Tensor::dtype() const {
  if (!impl_) throw std::logic_error("undefined tensor");
  return impl_->dtype;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, shape is " + to_string(shape()));
  return at(0);
}

double Tensor::at(std::size_t i) const {
  if (i >= numel()) throw IndexError("flat index " + std::to_string(i) + " out of range");
  return visit_dtype(dtype(), [&]<class T>() { return static_cast<double>(impl_->data<T>()[i]); });
}

void Tensor::set(std::size_t i, double value) {
  if (i >= numel()) throw IndexError("flat index " + std::to_string(i) + " out of range");
  visit_dtype(dtype(), [&]<class T>() { impl_->data<T>()[i] = static_cast<T>(value); });
}

std::vector<double> Tensor::to_vector() const {
  return visit_dtype(dtype(), [&]<class T>() {
    const auto& d = impl_->data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw std::logic_error("undefined tensor");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->has_grad; }

void Tensor::ensure_grad() {
  if (impl_->has_grad) return;
  visit_dtype(impl_->dtype, [&]<class T>() { impl_->grad<T>().assign(numel(), T(0)); });
  impl_->has_grad = true;
}

void Tensor::zero_grad() {
  if (!impl_) return;
  impl_->has_grad = false;
  impl_->grad_f32.clear();
  impl_->grad_f64.clear();
}

Tensor Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("tensor has no gradient");
  Tensor g(shape(), dtype());
  visit_dtype(dtype(), [&]<class T>() { g.impl_->data<T>() = impl_->grad<T>(); });
  return g;
}

std::vector<double> Tensor::grad_vector() const {
  if (!has_grad()) return std::vector<double>(numel(), 0.0);
  return visit_dtype(dtype(), [&]<class T>() {
    const auto& g = impl_->grad<T>();
    return std::vector<double>(g.begin(), g.end());
  });
}

Tensor Tensor::detach() const {
  Tensor t(shape(), dtype());
  visit_dtype(dtype(), [&]<class T>() { t.impl_->data<T>() = impl_->data<T>(); });
  return t;
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return detach();
  return Tensor::from(shape(), to_vector(), target);
}

Mask::Mask(Shape s, std::vector<std::uint8_t> v) : shape(std::move(s)), visible(std::move(v)) {
  if (visible.size() != rtal::numel(shape)) {
    throw ShapeError("mask of shape " + to_string(shape) + " needs " + std::to_string(rtal::numel(shape)) +
                     " entries, got " + std::to_string(visible.size()));
  }
}

}  // namespace rtal
