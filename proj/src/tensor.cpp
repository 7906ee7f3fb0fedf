#include "gmln/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace gmln {

std::string_view dtype_name(DType dtype) {
  return dtype == DType::f64 ? "float64" : "float32";
}

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

int normalize_axis(int axis, int rank) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  return a;
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  for (auto d : shape_)
    if (d < 1) throw ShapeError("tensor dims must be >= 1, got " + to_string(shape_));
  const auto n = static_cast<std::size_t>(gmln::numel(shape_));
  if (dtype == DType::f64)
    storage_ = std::make_shared<Storage>(std::vector<double>(n, 0.0));
  else
    storage_ = std::make_shared<Storage>(std::vector<float>(n, 0.0f));
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return Tensor(std::move(shape), dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
  if (static_cast<std::int64_t>(values.size()) != gmln::numel(shape))
    throw ShapeError("from_values: " + std::to_string(values.size()) + " values for shape " +
                     to_string(shape));
  Tensor t(std::move(shape), dtype);
  dispatch(dtype, [&]<class T>(T) {
    auto out = t.mutable_data<T>();
    std::transform(values.begin(), values.end(), out.begin(),
                   [](double v) { return static_cast<T>(v); });
  });
  return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()),
                     dtype);
}

std::int64_t Tensor::dim(int axis) const { return shape_[normalize_axis(axis, rank())]; }

double Tensor::at(std::int64_t flat_index) const {
  return dispatch(dtype_, [&]<class T>(T) { return static_cast<double>(data<T>()[flat_index]); });
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape_));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype_, [&]<class T>(T) {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.dtype_ = dtype_;
  if (storage_) t.storage_ = std::make_shared<Storage>(*storage_);
  return t;
}

Tensor Tensor::to(DType dtype) const {
  if (dtype == dtype_) return clone();
  Tensor t(shape_, dtype);
  t.copy_from(*this);
  return t;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (gmln::numel(shape) != numel())
    throw ShapeError("reshape " + to_string(shape_) + " -> " + to_string(shape) +
                     " changes element count");
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

void Tensor::fill(double value) {
  dispatch(dtype_, [&]<class T>(T) {
    auto d = mutable_data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
}

void Tensor::copy_from(const Tensor& other) {
  if (other.numel() != numel())
    throw ShapeError("copy_from " + to_string(other.shape_) + " into " + to_string(shape_));
  dispatch(dtype_, [&]<class T>(T) {
    auto dst = mutable_data<T>();
    dispatch(other.dtype_, [&]<class U>(U) {
      auto src = other.data<U>();
      std::transform(src.begin(), src.end(), dst.begin(), [](U v) { return static_cast<T>(v); });
    });
  });
}

}  // namespace gmln
