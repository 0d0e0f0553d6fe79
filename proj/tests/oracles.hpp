// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations used only by tests. These must stay
// naive and separate from the library code paths they check: matmul is a
// triple loop, eigenpairs come from power iteration with deflation, adapter
// forwards materialize the dense update matrices.

#pragma once

#include <hydra/adapter.hpp>
#include <hydra/matrix.hpp>
#include <hydra/rng.hpp>
#include <hydra/task.hpp>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace oracles {

using hydra::Matrix;

inline Matrix matmul_naive(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul_naive: shape");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k)
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += a(i, k) * b(k, j);
    return c;
}

inline Matrix transpose_naive(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

inline Matrix random_matrix(hydra::Rng& rng, std::size_t rows, std::size_t cols,
                            double lo = -1.0, double hi = 1.0) {
    Matrix m(rows, cols);
    for (auto& v : m.data()) v = lo + (hi - lo) * rng.next_uniform();
    return m;
}

// ----------------------------------------------------------------------------
// Power iteration with deflation on a symmetric PSD matrix.
// ----------------------------------------------------------------------------

struct EigResult {
    std::vector<double> values;  // descending
    Matrix vectors;              // columns, matching order
};

inline EigResult symmetric_eigs_power(Matrix g, std::size_t k,
                                      std::size_t max_iters = 200000,
                                      double tol = 1e-13) {
    const std::size_t n = g.rows();
    if (g.cols() != n) throw std::invalid_argument("symmetric_eigs_power: square only");
    EigResult res;
    res.vectors = Matrix(n, k);
    double scale = 0.0;
    for (double v : g.data()) scale = std::max(scale, std::abs(v));
    if (scale == 0.0) scale = 1.0;

    hydra::Rng rng(0x9E1C0DE5ULL);
    for (std::size_t e = 0; e < k; ++e) {
        std::vector<double> v(n);
        for (auto& x : v) x = rng.next_uniform() - 0.5;
        double lambda = 0.0;
        for (std::size_t it = 0; it < max_iters; ++it) {
            std::vector<double> w(n, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) w[i] += g(i, j) * v[j];
            double norm = 0.0;
            for (double x : w) norm += x * x;
            norm = std::sqrt(norm);
            if (norm == 0.0) break; // exact zero eigenvalue remainder
            for (auto& x : w) x /= norm;
            // Rayleigh quotient and residual
            std::vector<double> gw(n, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) gw[i] += g(i, j) * w[j];
            lambda = 0.0;
            for (std::size_t i = 0; i < n; ++i) lambda += w[i] * gw[i];
            double resid = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                resid = std::max(resid, std::abs(gw[i] - lambda * w[i]));
            v = w;
            if (resid <= tol * scale) break;
        }
        res.values.push_back(lambda);
        for (std::size_t i = 0; i < n; ++i) res.vectors(i, e) = v[i];
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) g(i, j) -= lambda * v[i] * v[j];
    }
    return res;
}

/// Top-k left singular vectors of M via eigenvectors of M M^T.
inline Matrix left_singular_oracle(const Matrix& m, std::size_t k) {
    Matrix gram = matmul_naive(m, transpose_naive(m));
    return symmetric_eigs_power(std::move(gram), k).vectors;
}

/// phi(M, N, i, j) computed entirely through the power-iteration route.
inline double phi_oracle(const Matrix& m, const Matrix& n, std::size_t i,
                         std::size_t j) {
    Matrix um = left_singular_oracle(m, i);
    Matrix un = left_singular_oracle(n, j);
    Matrix prod = matmul_naive(transpose_naive(um), un);
    double acc = 0.0;
    for (double v : prod.data()) acc += v * v;
    return acc / double(std::min(i, j));
}

// ----------------------------------------------------------------------------
// Dense three-term adapter forward (row convention).
// ----------------------------------------------------------------------------

/// h = x W0^T + b0 + s * x A^T + s * (x W0^T + b0) B^T with A and B
/// materialized densely, every product a triple loop.
inline Matrix hydra_forward_dense(const hydra::HydraLinear& layer, const Matrix& x) {
    const std::size_t d = layer.w0.rows();
    Matrix f = matmul_naive(x, transpose_naive(layer.w0));
    for (std::size_t i = 0; i < f.rows(); ++i)
        for (std::size_t j = 0; j < d; ++j) f(i, j) += layer.b0(0, j);
    Matrix h = f;
    if (layer.spec.has_parallel()) {
        Matrix a = matmul_naive(layer.a_up, layer.a_down);
        Matrix term = matmul_naive(x, transpose_naive(a));
        for (std::size_t i = 0; i < h.size(); ++i)
            h.data()[i] += layer.spec.scaling * term.data()[i];
    }
    if (layer.spec.has_sequential()) {
        Matrix b = matmul_naive(layer.b_up, layer.b_down);
        Matrix term = matmul_naive(f, transpose_naive(b));
        for (std::size_t i = 0; i < h.size(); ++i)
            h.data()[i] += layer.spec.scaling * term.data()[i];
    }
    return h;
}

// ----------------------------------------------------------------------------
// Majority-motif-matching classifier for the synthetic task.
// ----------------------------------------------------------------------------

/// Best window match count per class motif; argmax (lowest class on ties),
/// mapped through the task's label permutation when present.
inline int motif_classify(const std::vector<int>& seq,
                          const std::vector<std::vector<int>>& motifs,
                          const std::optional<std::vector<int>>& permutation) {
    std::size_t best_class = 0;
    std::size_t best_score = 0;
    for (std::size_t c = 0; c < motifs.size(); ++c) {
        const auto& motif = motifs[c];
        std::size_t class_best = 0;
        for (std::size_t pos = 0; pos + motif.size() <= seq.size(); ++pos) {
            std::size_t score = 0;
            for (std::size_t k = 0; k < motif.size(); ++k)
                score += std::size_t(seq[pos + k] == motif[k]);
            class_best = std::max(class_best, score);
        }
        if (class_best > best_score) {
            best_score = class_best;
            best_class = c;
        }
    }
    return permutation ? (*permutation)[best_class] : int(best_class);
}

inline double motif_oracle_accuracy(const hydra::SyntheticTaskSpec& spec,
                                    const hydra::Dataset& data) {
    const auto motifs = hydra::task_motifs(spec);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        correct += std::size_t(
            motif_classify(data.tokens[i], motifs, spec.label_permutation) ==
            data.labels[i]);
    }
    return double(correct) / double(data.size());
}

// ----------------------------------------------------------------------------
// Finite differences
// ----------------------------------------------------------------------------

/// Central finite difference of a scalar function with respect to one entry
/// of a parameter matrix the function reads.
template <typename F>
double finite_difference(F&& f, Matrix& param, std::size_t index, double step = 1e-5) {
    const double saved = param.data()[index];
    param.data()[index] = saved + step;
    const double hi = f();
    param.data()[index] = saved - step;
    const double lo = f();
    param.data()[index] = saved;
    return (hi - lo) / (2.0 * step);
}

inline double relative_error(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
    return std::abs(a - b) / denom;
}

} // namespace oracles
