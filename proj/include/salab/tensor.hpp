#pragma once

#include <Eigen/Dense>
#include <initializer_list>
#include <string>
#include <vector>

#include "salab/common.hpp"

namespace salab {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using VectorMap = Eigen::Map<Eigen::VectorXd>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

// Dense shape of rank 0 (scalar), 1 (vector) or 2 (matrix). Higher ranks are
// out of scope for this engine.
struct Shape {
  int rank = 0;
  Eigen::Index d0 = 1;
  Eigen::Index d1 = 1;

  Shape() = default;
  Shape(std::initializer_list<Eigen::Index> dims) {
    if (dims.size() > 2) throw ShapeError("rank > 2 is not supported");
    rank = static_cast<int>(dims.size());
    auto it = dims.begin();
    if (rank >= 1) d0 = *it++;
    if (rank == 2) d1 = *it;
  }
  static Shape scalar() { return Shape{}; }
  static Shape vector(Eigen::Index n) { return Shape{n}; }
  static Shape matrix(Eigen::Index r, Eigen::Index c) { return Shape{r, c}; }

  Eigen::Index size() const { return rank == 0 ? 1 : (rank == 1 ? d0 : d0 * d1); }
  Eigen::Index rows() const { return rank == 2 ? d0 : 1; }
  Eigen::Index cols() const { return rank == 2 ? d1 : size(); }

  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    if (rank >= 1 && d0 != o.d0) return false;
    if (rank == 2 && d1 != o.d1) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const;
};

// Flat row-major array of 64-bit floats plus a shape. Values are immutable in
// spirit once placed on a tape; mutation helpers exist for construction only.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(shape), data_(Eigen::ArrayXd::Zero(shape.size())) {}
  Tensor(Shape shape, Eigen::ArrayXd data) : shape_(shape), data_(std::move(data)) {
    if (shape_.size() != data_.size()) throw ShapeError("data length does not match shape " + shape_.str());
  }

  static Tensor scalar(double v);
  static Tensor from_vector(const Eigen::VectorXd& v);
  static Tensor from_matrix(const Eigen::MatrixXd& m);  // copies into row-major order
  static Tensor zeros(Shape shape) { return Tensor(shape); }
  static Tensor constant(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  Eigen::Index size() const { return data_.size(); }
  Eigen::Index rows() const { return shape_.rows(); }
  Eigen::Index cols() const { return shape_.cols(); }

  const Eigen::ArrayXd& array() const { return data_; }
  Eigen::ArrayXd& array() { return data_; }

  double operator()(Eigen::Index i) const { return data_(i); }
  double& operator()(Eigen::Index i) { return data_(i); }
  double operator()(Eigen::Index r, Eigen::Index c) const { return data_(r * shape_.cols() + c); }
  double& operator()(Eigen::Index r, Eigen::Index c) { return data_(r * shape_.cols() + c); }

  // Matrix views. Rank-0/1 tensors map as a single row.
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }
  MatrixMap matrix() { return MatrixMap(data_.data(), rows(), cols()); }
  ConstVectorMap vector() const { return ConstVectorMap(data_.data(), size()); }

  Eigen::MatrixXd to_matrix() const { return matrix(); }
  Eigen::VectorXd to_vector() const { return vector(); }

  bool all_finite() const { return data_.isFinite().all(); }

  Tensor reshaped(Shape shape) const {
    if (shape.size() != size()) throw ShapeError("reshape " + shape_.str() + " -> " + shape.str() + " changes size");
    return Tensor(shape, data_);
  }

 private:
  Shape shape_;
  Eigen::ArrayXd data_;
};

}  // namespace salab
