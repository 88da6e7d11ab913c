#pragma once

#include <Eigen/Dense>

#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "psub/error.hpp"

namespace psub {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major tensor with an explicit shape. Activations use the
/// channels x height x width layout; vectors are rank 1.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Vector::Zero(shape_product(shape_))) {
    check_extents();
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_product(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       to_string(shape_));
    }
  }

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static Tensor from_values(Shape shape, std::initializer_list<Scalar> values) {
    Vector v(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar x : values) v[i++] = x;
    return Tensor(std::move(shape), std::move(v));
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }

  // Accessors for the canonical C x H x W layout.
  Index channels() const {
    require_rank3();
    return shape_[0];
  }
  Index height() const {
    require_rank3();
    return shape_[1];
  }
  Index width() const {
    require_rank3();
    return shape_[2];
  }

  Scalar operator()(Index c, Index i, Index j) const { return data_[(c * shape_[1] + i) * shape_[2] + j]; }
  Scalar& operator()(Index c, Index i, Index j) { return data_[(c * shape_[1] + i) * shape_[2] + j]; }
  Scalar operator[](Index i) const { return data_[i]; }
  Scalar& operator[](Index i) { return data_[i]; }

  const Vector& data() const { return data_; }
  Vector& data() { return data_; }
  std::span<const Scalar> values() const { return {data_.data(), static_cast<std::size_t>(data_.size())}; }

  /// Row-major (rows x cols) view of the flat data.
  Eigen::Map<const RowMatrix<Scalar>> matrix(Index rows, Index cols) const {
    if (rows * cols != size()) throw ShapeError("matrix view does not cover tensor " + to_string(shape_));
    return {data_.data(), rows, cols};
  }
  Eigen::Map<RowMatrix<Scalar>> matrix(Index rows, Index cols) {
    if (rows * cols != size()) throw ShapeError("matrix view does not cover tensor " + to_string(shape_));
    return {data_.data(), rows, cols};
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <typename To>
  Tensor<To> cast() const {
    return Tensor<To>(shape_, data_.template cast<To>());
  }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void check_extents() const {
    for (Index e : shape_) {
      if (e < 0) throw ShapeError("negative extent in shape " + to_string(shape_));
    }
  }
  void require_rank3() const {
    if (shape_.size() != 3) throw ShapeError("expected a CxHxW tensor, got " + to_string(shape_));
  }

  Shape shape_;
  Vector data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Largest elementwise absolute difference; shapes must agree.
template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  if (a.size() == 0) return Scalar(0);
  return (a.data() - b.data()).cwiseAbs().maxCoeff();
}

}  // namespace psub
