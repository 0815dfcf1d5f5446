#pragma once

#include <Eigen/Dense>

namespace dsran {

using Scalar = double;
using Index = Eigen::Index;

// All tensors in the library are dense row-major 2-D matrices of doubles.
// Vectors are represented as 1xD rows so every op has a single carrier type.
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Mode { kTrain, kEval };

}  // namespace dsran
