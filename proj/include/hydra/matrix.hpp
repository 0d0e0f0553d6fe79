// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrix type and the handful of operations the rest of the
// toolkit is built on. Everything is double precision; batching is expressed
// by stacking feature vectors as rows.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace hydra {

// ----------------------------------------------------------------------------
// Error taxonomy shared across modules.
// ----------------------------------------------------------------------------

/// Operand shapes incompatible with the requested operation.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A precondition on values or configuration was violated.
struct ContractError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// An iterative numeric procedure failed (non-convergence, divergence, NaN).
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// File I/O or serialization failure.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ----------------------------------------------------------------------------
// Matrix
// ----------------------------------------------------------------------------

/// Dense 2-D array of doubles, row-major. `data.size() == rows * cols` always.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
        : rows_(rows), cols_(cols), data_(std::move(values)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                             " does not match " + shape_str());
        }
    }

    /// Build from nested braces: Matrix::from_rows({{1,2},{3,4}}).
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        Matrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
        std::size_t i = 0;
        for (const auto& r : rows) {
            if (r.size() != m.cols_) {
                throw ShapeError("Matrix::from_rows: ragged rows");
            }
            std::size_t j = 0;
            for (double v : r) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix filled(std::size_t rows, std::size_t cols, double value) {
        Matrix m(rows, cols);
        for (auto& v : m.data_) v = value;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    const double* row_ptr(std::size_t i) const { return data_.data() + i * cols_; }
    double* row_ptr(std::size_t i) { return data_.data() + i * cols_; }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    std::string shape_str() const {
        return "(" + std::to_string(rows_) + ", " + std::to_string(cols_) + ")";
    }

    bool operator==(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace detail {
using EigenRowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EigenMap = Eigen::Map<EigenRowMajor>;
using EigenConstMap = Eigen::Map<const EigenRowMajor>;

inline EigenConstMap map_of(const Matrix& m) {
    return EigenConstMap(m.data().data(), static_cast<Eigen::Index>(m.rows()),
                         static_cast<Eigen::Index>(m.cols()));
}

inline EigenMap map_of(Matrix& m) {
    return EigenMap(m.data().data(), static_cast<Eigen::Index>(m.rows()),
                    static_cast<Eigen::Index>(m.cols()));
}
} // namespace detail

// ----------------------------------------------------------------------------
// Core operations
// ----------------------------------------------------------------------------

/// General product with optional transposes: op(a) * op(b).
/// The plain matrix product is gemm(a, false, b, false); see matmul().
inline Matrix gemm(const Matrix& a, bool trans_a, const Matrix& b, bool trans_b) {
    const std::size_t ar = trans_a ? a.cols() : a.rows();
    const std::size_t ac = trans_a ? a.rows() : a.cols();
    const std::size_t br = trans_b ? b.cols() : b.rows();
    const std::size_t bc = trans_b ? b.rows() : b.cols();
    if (ac != br) {
        throw ShapeError("matmul: inner dimensions differ, lhs " +
                         (trans_a ? a.shape_str() + "^T" : a.shape_str()) + " vs rhs " +
                         (trans_b ? b.shape_str() + "^T" : b.shape_str()));
    }
    Matrix out(ar, bc);
    auto ma = detail::map_of(a);
    auto mb = detail::map_of(b);
    auto mo = detail::map_of(out);
    if (!trans_a && !trans_b) {
        mo.noalias() = ma * mb;
    } else if (trans_a && !trans_b) {
        mo.noalias() = ma.transpose() * mb;
    } else if (!trans_a && trans_b) {
        mo.noalias() = ma * mb.transpose();
    } else {
        mo.noalias() = ma.transpose() * mb.transpose();
    }
    return out;
}

/// Standard matrix product a * b; shapes (m,k)x(k,n) -> (m,n).
inline Matrix matmul(const Matrix& a, const Matrix& b) { return gemm(a, false, b, false); }

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
    return out;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
    return out;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("sub: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
    return out;
}

inline Matrix operator*(const Matrix& m, double c) {
    Matrix out = m;
    for (auto& v : out.data()) v *= c;
    return out;
}

inline Matrix operator*(double c, const Matrix& m) { return m * c; }

/// Sum of squared entries (the squared Frobenius norm).
inline double frobenius_norm_sq(const Matrix& m) {
    double acc = 0.0;
    for (double v : m.data()) acc += v * v;
    return acc;
}

inline double max_abs(const Matrix& m) {
    double acc = 0.0;
    for (double v : m.data()) acc = std::max(acc, std::abs(v));
    return acc;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("max_abs_diff: shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        acc = std::max(acc, std::abs(a.data()[i] - b.data()[i]));
    return acc;
}

inline bool is_finite(const Matrix& m) {
    for (double v : m.data())
        if (!std::isfinite(v)) return false;
    return true;
}

} // namespace hydra
