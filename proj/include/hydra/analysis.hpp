// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0
//
// Measurement tools: subspace similarity between weight matrices, the
// parameter-efficiency (PE) score, per-branch feature export, and parameter
// accounting. All pure over immutable snapshots.

#pragma once

#include "hydra/model.hpp"
#include "hydra/svd.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

namespace hydra {

/// Raised when an adapter's effective update is the zero matrix, which has no
/// singular directions to compare.
struct DegenerateAdapterError : ContractError {
    using ContractError::ContractError;
};

namespace detail {
inline double phi_from_svd(const SvdResult& sm, const SvdResult& sn, std::size_t i,
                           std::size_t j) {
    Matrix um = left_singular_block(sm, i);
    Matrix un = left_singular_block(sn, j);
    return frobenius_norm_sq(gemm(um, true, un, false)) /
           double(std::min(i, j));
}
} // namespace detail

/// Normalized similarity phi(M, N, i, j) = ||U_M^i^T U_N^j||_F^2 / min(i, j)
/// between the leading i and j left-singular directions of M and N.
/// Always in [0, 1]; 1 iff the smaller block lies inside the larger span.
inline double subspace_similarity(const Matrix& m, const Matrix& n, std::size_t i,
                                  std::size_t j) {
    if (m.rows() != n.rows()) {
        throw ShapeError("subspace_similarity: row dimensions differ, " + m.shape_str() +
                         " vs " + n.shape_str());
    }
    const std::size_t cap_m = std::min(m.rows(), m.cols());
    const std::size_t cap_n = std::min(n.rows(), n.cols());
    if (i < 1 || i > cap_m || j < 1 || j > cap_n) {
        throw ContractError("subspace_similarity: index out of range (i=" +
                            std::to_string(i) + " of " + std::to_string(cap_m) +
                            ", j=" + std::to_string(j) + " of " + std::to_string(cap_n) +
                            ")");
    }
    return detail::phi_from_svd(svd(m), svd(n), i, j);
}

enum class BranchKind { parallel, sequential };

/// Grid of phi(W0, A, i, j) or phi(W0, B*W0, i, j) for one adapted layer:
/// i spans the top ceil(i_max_frac * min(d, k)) singular directions of W0,
/// j the top j_max directions of the branch's effective update.
struct SimilarityGrid {
    Matrix values; // (i_max, j_max); values(i-1, j-1) = phi(.., i, j)
    std::size_t i_max = 0;
    std::size_t j_max = 0;
    std::string label;
};

inline SimilarityGrid similarity_grid_for_layer(const HydraLinear& layer,
                                                BranchKind which,
                                                double i_max_frac = 0.10,
                                                std::size_t j_max = 2) {
    const auto [a, bw0] = layer.effective_updates();
    const Matrix& update = which == BranchKind::parallel ? a : bw0;
    const bool present = which == BranchKind::parallel ? layer.spec.has_parallel()
                                                       : layer.spec.has_sequential();
    if (!present || frobenius_norm_sq(update) == 0.0) {
        throw DegenerateAdapterError(
            "similarity_grid: adapter update is zero (degenerate adapter), no "
            "singular directions to compare");
    }
    const std::size_t cap = std::min(layer.w0.rows(), layer.w0.cols());
    const std::size_t i_max =
        std::max<std::size_t>(1, std::size_t(std::ceil(i_max_frac * double(cap))));
    if (j_max < 1 || j_max > std::min(update.rows(), update.cols())) {
        throw ContractError("similarity_grid: j_max out of range");
    }

    SvdResult sw = svd(layer.w0);
    SvdResult su = svd(update);
    SimilarityGrid grid;
    grid.values = Matrix(i_max, j_max);
    grid.i_max = i_max;
    grid.j_max = j_max;
    grid.label = which == BranchKind::parallel ? "W0_vs_A" : "W0_vs_BW0";
    for (std::size_t i = 1; i <= i_max; ++i)
        for (std::size_t j = 1; j <= j_max; ++j)
            grid.values(i - 1, j - 1) = detail::phi_from_svd(sw, su, i, j);
    return grid;
}

/// layer_index addresses model.adapted_layers() in network order.
inline SimilarityGrid similarity_grid(MicroTransformer& model, std::size_t layer_index,
                                      BranchKind which, double i_max_frac = 0.10,
                                      std::size_t j_max = 2) {
    auto layers = model.adapted_layers();
    if (layer_index >= layers.size()) {
        throw ContractError("similarity_grid: layer index " +
                            std::to_string(layer_index) + " out of range (" +
                            std::to_string(layers.size()) + " adapted layers)");
    }
    return similarity_grid_for_layer(*layers[layer_index], which, i_max_frac, j_max);
}

inline void write_similarity_csv(const SimilarityGrid& grid, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("similarity csv: cannot open " + path);
    out << "i,j,phi\n";
    out << std::setprecision(17);
    for (std::size_t i = 1; i <= grid.i_max; ++i)
        for (std::size_t j = 1; j <= grid.j_max; ++j)
            out << i << "," << j << "," << grid.values(i - 1, j - 1) << "\n";
    if (!out) throw IoError("similarity csv: write failed for " + path);
}

// ----------------------------------------------------------------------------
// PE score
// ----------------------------------------------------------------------------

struct PeInput {
    double accuracy = 0.0;         // fraction in [0, 1]
    double trainable_params = 0.0; // p
    double m0 = 1e8;               // magnitude of the pre-trained model

    void validate() const {
        if (accuracy < 0.0 || accuracy > 1.0) {
            throw ContractError("pe_score: accuracy must be a fraction in [0, 1]");
        }
        if (trainable_params < 0.0) throw ContractError("pe_score: p must be >= 0");
        if (m0 <= 0.0) throw ContractError("pe_score: m0 must be > 0");
    }
};

/// PE = accuracy * exp(-log10(p / M0 + 1)). Equals accuracy at p = 0;
/// strictly decreasing in p, strictly increasing in accuracy.
inline double pe_score(const PeInput& in) {
    in.validate();
    return in.accuracy * std::exp(-std::log10(in.trainable_params / in.m0 + 1.0));
}

// ----------------------------------------------------------------------------
// Branch feature export
// ----------------------------------------------------------------------------

/// Write the last adapted layer's per-branch [CLS] features for a probe batch.
/// Rows carry the input-dependent parts (W0 x, s*A x, s*B*W0 x); the two
/// constant bias vectors (b0 and s*B*b0) are emitted as '#' header records, so
/// summing a given example's three rows plus the two bias records reproduces
/// the layer output.
///
/// tokens must be model-ready sequences ([CLS] already at position 0).
inline void export_branch_features(MicroTransformer& model,
                                   const std::vector<std::vector<int>>& tokens,
                                   const std::string& path) {
    if (tokens.empty()) throw ContractError("export_branch_features: empty batch");
    Rng unused(0);
    ForwardPass fp = model.forward(tokens, false, unused, /*capture_branches=*/true);
    const BranchCapture& cap = *fp.branches;
    const std::size_t d = cap.pretrained.cols();

    std::ofstream out(path);
    if (!out) throw IoError("feature export: cannot open " + path);
    out << std::setprecision(17);
    auto write_vec = [&](const Matrix& m, std::size_t row) {
        for (std::size_t j = 0; j < d; ++j) out << "," << m(row, j);
        out << "\n";
    };
    out << "# bias_pretrained";
    write_vec(cap.bias_pretrained, 0);
    out << "# bias_sequential";
    write_vec(cap.bias_sequential, 0);
    out << "example_id,branch";
    for (std::size_t j = 0; j < d; ++j) out << ",f_" << j;
    out << "\n";
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        out << i << ",pretrained";
        write_vec(cap.pre_bias, i);
        out << i << ",parallel";
        write_vec(cap.parallel, i);
        // strip the constant s*B*b0 so the row is the x-dependent part
        out << i << ",sequential";
        for (std::size_t j = 0; j < d; ++j)
            out << "," << cap.sequential(i, j) - cap.bias_sequential(0, j);
        out << "\n";
    }
    if (!out) throw IoError("feature export: write failed for " + path);
}

// ----------------------------------------------------------------------------
// Parameter accounting
// ----------------------------------------------------------------------------

struct ParamReport {
    std::size_t adapter_params = 0;
    std::size_t head_params = 0;
    std::size_t frozen_params = 0;
    std::size_t total = 0;
    double trainable_millions = 0.0; // (adapter + head) / 1e6
};

inline ParamReport param_report(MicroTransformer& model) {
    const auto c = model.param_counts();
    ParamReport r;
    r.adapter_params = c.adapter;
    r.head_params = c.head;
    r.frozen_params = c.frozen;
    r.total = c.total();
    r.trainable_millions = double(c.adapter + c.head) / 1e6;
    return r;
}

} // namespace hydra
