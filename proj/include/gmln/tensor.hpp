#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "gmln/error.hpp"

namespace gmln {

enum class DType : std::uint8_t { f32, f64 };

std::string_view dtype_name(DType dtype);

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::f32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::f64;
}

/// Calls `fn(T{})` with T = float or double according to `dtype`.
template <class Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::f64) return fn(double{});
  return fn(float{});
}

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array (last axis fastest). Volumes use (B, C, D, H, W).
///
/// Copies are shallow: two Tensors may share one buffer. Kernels never write into
/// their inputs; in-place mutation is reserved for parameter updates and loaders.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, DType dtype);

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from_values(Shape shape, std::span<const double> values,
                            DType dtype = DType::f64);
  static Tensor from_values(Shape shape, std::initializer_list<double> values,
                            DType dtype = DType::f64);
  template <class T>
  static Tensor from_vector(Shape shape, std::vector<T> values);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  /// Axis size; negative axes count from the end.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return gmln::numel(shape_); }
  DType dtype() const { return dtype_; }

  template <class T>
  std::span<const T> data() const;
  template <class T>
  std::span<T> mutable_data();

  double at(std::int64_t flat_index) const;
  double item() const;
  std::vector<double> to_vector() const;

  Tensor clone() const;
  Tensor to(DType dtype) const;
  /// View with a new shape over the same buffer.
  Tensor reshaped(Shape shape) const;
  void fill(double value);
  /// Copies values (with dtype conversion) from a tensor of equal element count.
  void copy_from(const Tensor& other);

  const void* storage_id() const { return storage_.get(); }

 private:
  using Storage = std::variant<std::vector<float>, std::vector<double>>;
  Shape shape_;
  DType dtype_ = DType::f32;
  std::shared_ptr<Storage> storage_;
};

/// Normalizes a possibly negative axis and validates it against `rank`.
int normalize_axis(int axis, int rank);

template <class T>
Tensor Tensor::from_vector(Shape shape, std::vector<T> values) {
  if (static_cast<std::int64_t>(values.size()) != gmln::numel(shape))
    throw ShapeError("from_vector: " + std::to_string(values.size()) +
                     " values for shape " + to_string(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.dtype_ = dtype_of<T>();
  t.storage_ = std::make_shared<Storage>(std::move(values));
  return t;
}

template <class T>
std::span<const T> Tensor::data() const {
  if (!storage_) throw ContractError("access to undefined tensor");
  if (dtype_ != dtype_of<T>())
    throw ContractError(std::string("tensor dtype is ") + std::string(dtype_name(dtype_)));
  const auto& v = std::get<std::vector<T>>(*storage_);
  return {v.data(), v.size()};
}

template <class T>
std::span<T> Tensor::mutable_data() {
  if (!storage_) throw ContractError("access to undefined tensor");
  if (dtype_ != dtype_of<T>())
    throw ContractError(std::string("tensor dtype is ") + std::string(dtype_name(dtype_)));
  auto& v = std::get<std::vector<T>>(*storage_);
  return {v.data(), v.size()};
}

}  // namespace gmln
