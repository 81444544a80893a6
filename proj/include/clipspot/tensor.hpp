#pragma once

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <vector>

#include "clipspot/rng.hpp"

namespace clipspot {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;

template <class To, class From>
Mat<To> cast_mat(const Mat<From>& m) {
    return m.template cast<To>();
}

template <class S>
Mat<S> gaussian_mat(int rows, int cols, double stddev, Rng& rng) {
    Mat<S> m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = static_cast<S>(stddev * rng.normal());
    return m;
}

// Glorot-uniform for a fan_in x fan_out weight.
template <class S>
Mat<S> glorot_mat(int rows, int cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Mat<S> m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = static_cast<S>(limit * (2.0 * rng.uniform() - 1.0));
    return m;
}

// Sinusoidal position table, rows are positions.
template <class S>
Mat<S> positional_table(int length, int dim) {
    Mat<S> p(length, dim);
    for (int pos = 0; pos < length; ++pos) {
        for (int d = 0; d < dim; ++d) {
            const double rate = std::pow(10000.0, -2.0 * (d / 2) / static_cast<double>(dim));
            const double x = pos * rate;
            p(pos, d) = static_cast<S>((d % 2 == 0) ? std::sin(x) : std::cos(x));
        }
    }
    return p;
}

}  // namespace clipspot
