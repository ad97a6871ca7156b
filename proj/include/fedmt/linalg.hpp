#pragma once

#include <Eigen/Dense>

namespace fedmt {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& logits);

}  // namespace fedmt
