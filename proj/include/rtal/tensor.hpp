#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace rtal {

enum class DType : std::uint8_t { F32, F64 };

const char* to_string(DType dtype);

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Calls `f.template operator()<T>()` with T = float or double.
template <class F>
decltype(auto) visit_dtype(DType dtype, F&& f) {
  if (dtype == DType::F64) return f.template operator()<double>();
  return f.template operator()<float>();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  DType dtype = DType::F32;
  std::vector<float> f32;
  std::vector<double> f64;
  std::vector<float> grad_f32;
  std::vector<double> grad_f64;
  bool has_grad = false;
  bool requires_grad = false;

  template <class T>
  std::vector<T>& data() {
    if constexpr (std::is_same_v<T, float>) return f32; else return f64;
  }
  template <class T>
  std::vector<T>& grad() {
    if constexpr (std::is_same_v<T, float>) return grad_f32; else return grad_f64;
  }
};

}  // namespace detail

/// Dense n-dimensional array that can participate in reverse-mode
/// differentiation.
///
/// A Tensor is a handle: copies alias the same storage, which is what lets
/// model parameters be updated in place by the optimizer and keeps tape
/// records cheap. Use clone() for an independent copy. Elements are stored
/// contiguously in row-major order as either float or double.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::F32);

  static Tensor zeros(Shape shape, DType dtype = DType::F32) { return Tensor(std::move(shape), dtype); }
  static Tensor full(Shape shape, double value, DType dtype = DType::F32);
  static Tensor from(Shape shape, const std::vector<double>& values, DType dtype = DType::F32);
  static Tensor scalar(double value, DType dtype = DType::F32);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  /// Extent of `axis`; negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> values() const { return check<T>(), std::span<const T>(impl_->data<T>()); }
  template <class T>
  std::span<T> mutable_values() { return check<T>(), std::span<T>(impl_->data<T>()); }

  double item() const;
  double at(std::size_t flat_index) const;
  void set(std::size_t flat_index, double value);
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  /// Gradient as a fresh tensor without grad tracking. Throws if absent.
  Tensor grad() const;
  std::vector<double> grad_vector() const;
  template <class T>
  std::span<T> mutable_grad() {
    check<T>();
    ensure_grad();
    return std::span<T>(impl_->grad<T>());
  }
  template <class T>
  std::span<const T> grad_values() const {
    check<T>();
    return std::span<const T>(impl_->grad<T>());
  }
  /// Allocates a zero gradient buffer if none is present.
  void ensure_grad();
  void zero_grad();

  /// Copy of the values with no gradient tracking.
  Tensor detach() const;
  /// Independent copy of the values preserving requires_grad.
  Tensor clone() const;
  Tensor to(DType dtype) const;

  /// Same underlying storage.
  bool is(const Tensor& other) const noexcept { return impl_ == other.impl_; }
  detail::TensorImpl* impl() const noexcept { return impl_.get(); }

 private:
  template <class T>
  void check() const;

  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {
[[noreturn]] void throw_dtype_mismatch(DType have, DType want);
}

template <class T>
void Tensor::check() const {
  const DType want = std::is_same_v<T, double> ? DType::F64 : DType::F32;
  if (impl_ == nullptr || impl_->dtype != want) detail::throw_dtype_mismatch(impl_ ? impl_->dtype : want, want);
}

/// Boolean visibility mask for attention scores. Its rank equals the rank of
/// the tensor it is applied to and each extent either matches or is 1
/// (broadcast).
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> visible;

  Mask() = default;
  Mask(Shape s, bool value) : shape(std::move(s)), visible(rtal::numel(shape), value ? 1 : 0) {}
  Mask(Shape s, std::vector<std::uint8_t> v);
};

}  // namespace rtal
