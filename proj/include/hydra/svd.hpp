// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0
//
// Thin SVD via one-sided Jacobi rotations. Small and dependency-free; accuracy
// is what the subspace-similarity analysis needs, not speed on big matrices.

#pragma once

#include "hydra/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace hydra {

/// Thin SVD of an m x n input: u is m x min(m,n) with orthonormal columns,
/// s holds min(m,n) non-increasing singular values, vt is min(m,n) x n.
struct SvdResult {
    Matrix u;
    std::vector<double> s;
    Matrix vt;
};

namespace detail {

// One-sided Jacobi on the columns of a (requires rows >= cols). Convergence:
// every off-diagonal Gram entry |a_p . a_q| <= tol * ||a_p|| * ||a_q||.
inline constexpr double kSvdTolerance = 1e-12;
inline constexpr int kSvdMaxSweeps = 60;

inline SvdResult svd_tall(const Matrix& input) {
    const std::size_t m = input.rows();
    const std::size_t n = input.cols();
    Matrix a = input;
    Matrix v = Matrix::identity(n);

    bool converged = false;
    double residual = 0.0;
    for (int sweep = 0; sweep < kSvdMaxSweeps && !converged; ++sweep) {
        residual = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t k = 0; k < m; ++k) {
                    const double ap = a(k, p), aq = a(k, q);
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                const double denom = std::sqrt(alpha * beta);
                if (denom == 0.0) continue;
                const double rel = std::abs(gamma) / denom;
                residual = std::max(residual, rel);
                if (rel <= kSvdTolerance) continue;

                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t =
                    (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t k = 0; k < m; ++k) {
                    const double ap = a(k, p), aq = a(k, q);
                    a(k, p) = c * ap - s * aq;
                    a(k, q) = s * ap + c * aq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vp = v(k, p), vq = v(k, q);
                    v(k, p) = c * vp - s * vq;
                    v(k, q) = s * vp + c * vq;
                }
            }
        }
        converged = residual <= kSvdTolerance;
    }
    if (!converged) {
        throw NumericalError("svd: Jacobi failed to converge in " +
                             std::to_string(kSvdMaxSweeps) +
                             " sweeps, off-diagonal residual " + std::to_string(residual));
    }

    std::vector<double> norms(n);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < m; ++k) acc += a(k, j) * a(k, j);
        norms[j] = std::sqrt(acc);
    }

    // Descending order, stable in the original column index on ties.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

    SvdResult res;
    res.u = Matrix(m, n);
    res.s.resize(n);
    res.vt = Matrix(n, n);
    std::size_t zero_slots = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        res.s[j] = norms[src];
        for (std::size_t k = 0; k < n; ++k) res.vt(j, k) = v(k, src);
        if (norms[src] > 0.0) {
            const double inv = 1.0 / norms[src];
            for (std::size_t k = 0; k < m; ++k) res.u(k, j) = a(k, src) * inv;
        } else {
            ++zero_slots;
        }
    }

    // Zero singular values leave empty u columns; complete to an orthonormal
    // set from canonical basis vectors so u^T u = I holds regardless of rank.
    if (zero_slots > 0) {
        std::size_t next_basis = 0;
        for (std::size_t j = n - zero_slots; j < n; ++j) {
            while (next_basis < m) {
                std::vector<double> cand(m, 0.0);
                cand[next_basis++] = 1.0;
                for (int pass = 0; pass < 2; ++pass) {
                    for (std::size_t c = 0; c < j; ++c) {
                        double dot = 0.0;
                        for (std::size_t k = 0; k < m; ++k) dot += cand[k] * res.u(k, c);
                        for (std::size_t k = 0; k < m; ++k) cand[k] -= dot * res.u(k, c);
                    }
                }
                double nrm = 0.0;
                for (double x : cand) nrm += x * x;
                nrm = std::sqrt(nrm);
                if (nrm > 0.5) {
                    for (std::size_t k = 0; k < m; ++k) res.u(k, j) = cand[k] / nrm;
                    break;
                }
            }
        }
    }
    return res;
}

// Deterministic sign convention: the largest-magnitude entry of each u column
// is positive (first such index on ties). vt rows flip in tandem so the
// reconstruction is unchanged.
inline void apply_sign_convention(SvdResult& res) {
    for (std::size_t j = 0; j < res.u.cols(); ++j) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t k = 0; k < res.u.rows(); ++k) {
            const double mag = std::abs(res.u(k, j));
            if (mag > best) {
                best = mag;
                arg = k;
            }
        }
        if (res.u(arg, j) < 0.0) {
            for (std::size_t k = 0; k < res.u.rows(); ++k) res.u(k, j) = -res.u(k, j);
            for (std::size_t k = 0; k < res.vt.cols(); ++k) res.vt(j, k) = -res.vt(j, k);
        }
    }
}

} // namespace detail

inline SvdResult svd(const Matrix& input) {
    if (input.rows() == 0 || input.cols() == 0) {
        throw ContractError("svd: matrix must have at least one row and column");
    }
    if (!is_finite(input)) throw ContractError("svd: input has non-finite entries");

    SvdResult res;
    if (input.rows() >= input.cols()) {
        res = detail::svd_tall(input);
    } else {
        // A = U S V^T  <=>  A^T = V S U^T
        SvdResult t = detail::svd_tall(transpose(input));
        res.u = transpose(t.vt);
        res.s = std::move(t.s);
        res.vt = transpose(t.u);
    }
    detail::apply_sign_convention(res);
    return res;
}

/// First k left singular vectors as an (rows x k) block.
inline Matrix left_singular_block(const SvdResult& res, std::size_t k) {
    if (k > res.u.cols()) {
        throw ContractError("left_singular_block: k exceeds available directions");
    }
    Matrix out(res.u.rows(), k);
    for (std::size_t i = 0; i < res.u.rows(); ++i)
        for (std::size_t j = 0; j < k; ++j) out(i, j) = res.u(i, j);
    return out;
}

} // namespace hydra
