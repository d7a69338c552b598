#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tpmamba {

using Index = std::int64_t;
using Shape = std::vector<Index>;

/// Raised when tensor extents do not line up for an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid configuration values (kernel sizes, modes, ranks).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for malformed user data: label ranges, files, empty datasets.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a computation produces or receives non-finite values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

/// Dense row-major n-dimensional array. Storage is a flat Eigen column array so
/// element-wise math can use Eigen expressions directly.
template <typename Scalar>
class Tensor {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents();
    data_.setZero(numel(shape_));
  }

  Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
    check_extents();
    data_.setConstant(numel(shape_), fill);
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
    check_extents();
    if (static_cast<Index>(values.size()) != numel(shape_)) {
      throw DimensionError("tensor literal has " + std::to_string(values.size()) +
                           " values for shape " + shape_str(shape_));
    }
    data_.resize(numel(shape_));
    std::copy(values.begin(), values.end(), data_.data());
  }

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != numel(shape_)) {
      throw DimensionError("storage of " + std::to_string(data_.size()) +
                           " elements does not match shape " + shape_str(shape_));
    }
  }

  static Tensor from_vector(Shape shape, const std::vector<Scalar>& values) {
    Storage data(static_cast<Index>(values.size()));
    std::copy(values.begin(), values.end(), data.data());
    return Tensor(std::move(shape), std::move(data));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty() && data_.size() == 0; }

  /// Extent of axis `axis`; negative values count from the back.
  Index dim(int axis) const { return shape_.at(normalize_axis(axis)); }

  int normalize_axis(int axis) const {
    const int r = rank();
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           shape_str(shape_));
    }
    return a;
  }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> span() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> span() const {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  const Scalar& operator[](Index i) const { return data_[i]; }

  Index offset(std::initializer_list<Index> idx) const {
    if (static_cast<int>(idx.size()) != rank()) {
      throw DimensionError("index of rank " + std::to_string(idx.size()) + " for shape " +
                           shape_str(shape_));
    }
    Index off = 0;
    int axis = 0;
    for (Index i : idx) off = off * shape_[axis++] + i;
    return off;
  }

  Scalar& at(std::initializer_list<Index> idx) { return data_[offset(idx)]; }
  const Scalar& at(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  void fill(Scalar v) { data_.setConstant(v); }

  /// Byte-level equality of shape and contents.
  friend bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ &&
           std::memcmp(a.data(), b.data(), sizeof(Scalar) * static_cast<std::size_t>(a.size())) ==
               0;
  }

 private:
  void check_extents() const {
    for (Index e : shape_) {
      if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape_));
    }
  }

  Shape shape_;
  Storage data_;
};

/// Row-major strides of a shape (last axis has stride 1).
inline Shape strides_of(const Shape& shape) {
  Shape s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
  return s;
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

using LabelMap = Tensor<std::uint8_t>;

}  // namespace tpmamba
