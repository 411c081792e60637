#pragma once

#include <Eigen/Core>
#include <string>

namespace pretext {

// All vector/matrix quantities in the project are dense row-major Eigen
// matrices templated on scalar. float is the training precision, double the
// verification precision (gradient checks).
template <typename Scalar>
using Tensor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

template <typename Scalar>
std::string shape_str(const Tensor<Scalar>& t) {
  return "[" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + "]";
}

}  // namespace pretext
