#include "salab/tensor.hpp"

namespace salab {

std::string Shape::str() const {
  if (rank == 0) return "[]";
  if (rank == 1) return "[" + std::to_string(d0) + "]";
  return "[" + std::to_string(d0) + "," + std::to_string(d1) + "]";
}

Tensor Tensor::scalar(double v) {
  Tensor t{Shape::scalar()};
  t.data_(0) = v;
  return t;
}

Tensor Tensor::from_vector(const Eigen::VectorXd& v) {
  Tensor t{Shape::vector(v.size())};
  t.data_ = v.array();
  return t;
}

Tensor Tensor::from_matrix(const Eigen::MatrixXd& m) {
  Tensor t{Shape::matrix(m.rows(), m.cols())};
  t.matrix() = m;
  return t;
}

Tensor Tensor::constant(Shape shape, double v) {
  Tensor t{shape};
  t.data_.setConstant(v);
  return t;
}

}  // namespace salab
