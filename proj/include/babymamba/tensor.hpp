#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "babymamba/errors.hpp"

namespace bm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape);

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

template <typename Scalar>
using VectorMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

template <typename Scalar>
using ConstVectorMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

// Storage with a fixed alignment, so vectorized kernels split work the same
// way on every allocation.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

// Dense row-major array with shape metadata.
template <typename Scalar>
class BasicTensor {
 public:
  BasicTensor() = default;

  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(bm::numel(shape_), fill) {
    check_extents();
  }

  BasicTensor(Shape shape, AlignedVector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (bm::numel(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  BasicTensor(Shape shape, const std::vector<Scalar>& data)
      : BasicTensor(std::move(shape), AlignedVector<Scalar>(data.begin(), data.end())) {}

  static BasicTensor scalar(Scalar v) { return BasicTensor(Shape{1}, std::vector<Scalar>{v}); }

  static BasicTensor vector(std::initializer_list<Scalar> values) {
    return BasicTensor(Shape{values.size()}, std::vector<Scalar>(values));
  }

  static BasicTensor matrix(std::initializer_list<std::initializer_list<Scalar>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<Scalar> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return BasicTensor(Shape{r, c}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }
  AlignedVector<Scalar>& storage() { return data_; }
  const AlignedVector<Scalar>& storage() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  Scalar& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  Scalar at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  Scalar& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  Scalar at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // View as (rows x last-extent), folding all leading axes into rows.
  MatrixMap<Scalar> rows_view() {
    const auto cols = shape_.empty() ? 1 : shape_.back();
    return MatrixMap<Scalar>(data_.data(), static_cast<Eigen::Index>(data_.size() / cols),
                             static_cast<Eigen::Index>(cols));
  }
  ConstMatrixMap<Scalar> rows_view() const {
    const auto cols = shape_.empty() ? 1 : shape_.back();
    return ConstMatrixMap<Scalar>(data_.data(), static_cast<Eigen::Index>(data_.size() / cols),
                                  static_cast<Eigen::Index>(cols));
  }
  VectorMap<Scalar> flat() { return VectorMap<Scalar>(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  ConstVectorMap<Scalar> flat() const {
    return ConstVectorMap<Scalar>(data_.data(), static_cast<Eigen::Index>(data_.size()));
  }

  BasicTensor reshaped(Shape shape) const {
    if (bm::numel(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (Scalar v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  AlignedVector<Scalar> data_;
};

using Tensor = BasicTensor<double>;

template <typename Scalar>
Scalar max_abs_diff(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return (a.flat() - b.flat()).cwiseAbs().maxCoeff();
}

// Reverse the time axis (axis 1 for rank >= 2, axis 0 for rank 1).
template <typename Scalar>
BasicTensor<Scalar> reverse_time(const BasicTensor<Scalar>& x, std::size_t axis = 1) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("reverse_time axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  BasicTensor<Scalar> out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t t = 0; t < len; ++t) {
      const Scalar* src = x.data().data() + (o * len + t) * inner;
      Scalar* dst = out.data().data() + (o * len + (len - 1 - t)) * inner;
      std::copy(src, src + inner, dst);
    }
  }
  return out;
}

}  // namespace bm
