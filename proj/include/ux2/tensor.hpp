// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "ux2/error.hpp"

namespace ux2 {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr Dtype dtype_of() {
  if constexpr (sizeof(T) == 4) return Dtype::F32;
  else return Dtype::F64;
}

/// Dense row-major tensor. The scalar type is a template parameter, so a
/// graph is uniform in dtype by construction; the checkpoint container is
/// the one place where f32 and f64 tensors meet, tagged explicitly.
template <typename T>
class TensorT {
public:
  TensorT() = default;
  explicit TensorT(Shape shape) : shape_(std::move(shape)), data_(checked_numel(shape_)) {}
  TensorT(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }
  static TensorT full(Shape shape, T v) {
    TensorT t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }
  static TensorT scalar(T v) { return TensorT({}, {v}); }

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i >= 0 ? i : rank() + i)]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  T& at(std::initializer_list<int64_t> idx) { return data_[static_cast<size_t>(offset(idx))]; }
  const T& at(std::initializer_list<int64_t> idx) const {
    return data_[static_cast<size_t>(offset(idx))];
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  /// Scalar value of a one-element tensor.
  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

private:
  static int64_t checked_numel(const Shape& s) {
    int64_t n = shape_numel(s);
    if (n < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
    return n;
  }
  int64_t offset(std::initializer_list<int64_t> idx) const {
    int64_t off = 0;
    size_t k = 0;
    for (int64_t i : idx) {
      off = off * shape_[k] + i;
      ++k;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

using TensorF = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace ux2
