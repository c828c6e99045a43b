#pragma once

#include <vector>

#include <Eigen/Dense>

#include "shharm/nn/tensor.hpp"

namespace shharm::nn {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// 3x3x3 cross-correlation. x: [C_in, D, H, W, B] (batch innermost), weight: [C_out, C_in, 3, 3, 3],
// bias: [C_out]. Output [C_out, D', H', W', B]. padding 1 keeps the spatial size (zero padding), padding 0
// shrinks each spatial dimension by 2.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int padding);

// Dense layer on [in, B] columns: W [out, in], b [out] -> [out, B].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// Constant left multiplication: M [rows, in] times x [in, ...] -> [rows, ...].
template <typename T>
Var<T> matmul_const(const RowMatrix<T>& m, const Var<T>& x);

// max(x, 0); the subgradient at 0 is 0.
template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& x, T factor);

// Concatenation along the leading (channel) axis.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts);

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);

template <typename T>
Var<T> sum(const Var<T>& x);

// mean(x^2) over all elements, accumulated in double.
template <typename T>
Var<T> mean_square(const Var<T>& x);

}  // namespace shharm::nn
