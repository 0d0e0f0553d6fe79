// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0
//
// Composite linear layers with low-rank adaptation branches.
//
// A HydraLinear is a frozen affine map f(x) = W0 x + b0 plus up to two
// trainable low-rank branches:
//   parallel    g_p(x)    = A_up A_down x          (the LoRA form)
//   sequential  g_s(f(x)) = B_up B_down f(x)       (the SeqLoRA form)
// Training-mode output is h = f(x) + s*g_p(x) + s*g_s(f(x)). The sequential
// branch consumes f(x) *including* the bias, so folding yields
//   W = W0 + s*A + s*B*W0,   b = b0 + s*B*b0
// and inference needs a single affine map again.
//
// Activations are row-major batches: each row of x is one k-dimensional
// feature vector, so every product above appears transposed on the tape
// (x * W0^T and friends). Parameter shapes match the column-oriented math:
// w0 is (d, k) = (out, in), a_up (d, r_a), a_down (r_a, k), b_up (d, r_b),
// b_down (r_b, d), b0 (1, d).

#pragma once

#include "hydra/autodiff.hpp"
#include "hydra/matrix.hpp"
#include "hydra/rng.hpp"

#include <algorithm>
#include <cstddef>
#include <string>

namespace hydra {

/// Which branches exist and how they are initialized.
/// rank 0 means the branch is absent.
struct AdapterSpec {
    std::size_t parallel_rank = 0;    // r_a
    std::size_t sequential_rank = 0;  // r_b
    double init_sigma = 0.02;         // Gaussian std for down-projections
    double adapter_dropout = 0.0;     // applied to each branch's input while training
    double scaling = 1.0;             // multiplier on each branch output

    bool has_parallel() const { return parallel_rank > 0; }
    bool has_sequential() const { return sequential_rank > 0; }
    bool has_adapter() const { return has_parallel() || has_sequential(); }

    static AdapterSpec lora(std::size_t r) { return {r, 0, 0.02, 0.0, 1.0}; }
    static AdapterSpec seqlora(std::size_t r) { return {0, r, 0.02, 0.0, 1.0}; }
    static AdapterSpec hydra(std::size_t r_a, std::size_t r_b) {
        return {r_a, r_b, 0.02, 0.0, 1.0};
    }
    static AdapterSpec none() { return {}; }
};

/// Result of folding: a plain affine map, shareable for inference.
struct MergedLinear {
    Matrix w; // (d, k)
    Matrix b; // (1, d)

    Matrix forward(const Matrix& x) const {
        Matrix out = gemm(x, false, w, true);
        for (std::size_t i = 0; i < out.rows(); ++i)
            for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += b(0, j);
        return out;
    }
};

/// Tape node ids of one layer's parameters for the current step.
struct HydraLeafIds {
    NodeId w0 = -1;
    NodeId b0 = -1;
    NodeId a_up = -1;
    NodeId a_down = -1;
    NodeId b_up = -1;
    NodeId b_down = -1;
};

/// Node ids produced by one training-mode forward; parallel/sequential are -1
/// when the branch is absent. `pretrained`, `parallel` and `sequential` sum to
/// `out` exactly (the bias terms ride inside pretrained and sequential).
struct HydraForwardNodes {
    NodeId out = -1;
    NodeId pre_bias = -1;    // W0 x, before the bias
    NodeId pretrained = -1;  // f(x) = W0 x + b0
    NodeId parallel = -1;    // s * A_up A_down x
    NodeId sequential = -1;  // s * B_up B_down f(x)
};

class HydraLinear {
public:
    Matrix w0;      // (d, k), frozen during fine-tuning
    Matrix b0;      // (1, d), frozen during fine-tuning
    Matrix a_up;    // (d, r_a), zero-initialized
    Matrix a_down;  // (r_a, k), Gaussian-initialized
    Matrix b_up;    // (d, r_b), zero-initialized
    Matrix b_down;  // (r_b, d), Gaussian-initialized
    AdapterSpec spec;

    std::size_t out_dim() const { return w0.rows(); }
    std::size_t in_dim() const { return w0.cols(); }

    /// Register this layer's parameters on the tape for one step.
    HydraLeafIds insert_leaves(Tape& tape, bool base_trainable,
                               bool adapters_trainable) const {
        HydraLeafIds ids;
        ids.w0 = tape.leaf(w0, base_trainable);
        ids.b0 = tape.leaf(b0, base_trainable);
        if (spec.has_parallel()) {
            ids.a_up = tape.leaf(a_up, adapters_trainable);
            ids.a_down = tape.leaf(a_down, adapters_trainable);
        }
        if (spec.has_sequential()) {
            ids.b_up = tape.leaf(b_up, adapters_trainable);
            ids.b_down = tape.leaf(b_down, adapters_trainable);
        }
        return ids;
    }

    /// Training-mode forward on the tape. x is (n, k) rows of features.
    /// In training mode, adapter dropout hits each branch's input (x for the
    /// parallel branch, f(x) for the sequential); it never enters fold().
    HydraForwardNodes forward(Tape& tape, const HydraLeafIds& ids, NodeId x,
                              bool training, Rng& rng) const {
        HydraForwardNodes nodes;
        nodes.pre_bias = tape.matmul(x, ids.w0, false, true);
        nodes.pretrained = tape.add_bias_rowwise(nodes.pre_bias, ids.b0);
        nodes.out = nodes.pretrained;
        if (spec.has_parallel()) {
            NodeId xin = tape.dropout(x, spec.adapter_dropout, rng, training);
            NodeId down = tape.matmul(xin, ids.a_down, false, true);
            NodeId up = tape.matmul(down, ids.a_up, false, true);
            nodes.parallel = tape.scale(up, spec.scaling);
            nodes.out = tape.add(nodes.out, nodes.parallel);
        }
        if (spec.has_sequential()) {
            NodeId fin = tape.dropout(nodes.pretrained, spec.adapter_dropout, rng, training);
            NodeId down = tape.matmul(fin, ids.b_down, false, true);
            NodeId up = tape.matmul(down, ids.b_up, false, true);
            nodes.sequential = tape.scale(up, spec.scaling);
            nodes.out = tape.add(nodes.out, nodes.sequential);
        }
        return nodes;
    }

    /// Value-level forward with dropout off; equals fold().forward(x).
    Matrix forward_eval(const Matrix& x) const {
        Matrix f = gemm(x, false, w0, true);
        for (std::size_t i = 0; i < f.rows(); ++i)
            for (std::size_t j = 0; j < f.cols(); ++j) f(i, j) += b0(0, j);
        Matrix out = f;
        if (spec.has_parallel()) {
            Matrix up = gemm(gemm(x, false, a_down, true), false, a_up, true);
            out = out + up * spec.scaling;
        }
        if (spec.has_sequential()) {
            Matrix up = gemm(gemm(f, false, b_down, true), false, b_up, true);
            out = out + up * spec.scaling;
        }
        return out;
    }

    /// Absorb both branches into a single affine map:
    /// W = W0 + s*A + s*B*W0 and b = b0 + s*B*b0.
    MergedLinear fold() const {
        MergedLinear merged{w0, b0};
        if (spec.has_parallel()) {
            Matrix a = matmul(a_up, a_down);
            merged.w = merged.w + a * spec.scaling;
        }
        if (spec.has_sequential()) {
            Matrix b_eff = matmul(b_up, b_down); // (d, d)
            merged.w = merged.w + matmul(b_eff, w0) * spec.scaling;
            merged.b = merged.b + gemm(b0, false, b_eff, true) * spec.scaling;
        }
        return merged;
    }

    /// The dense update matrices of each branch, unscaled:
    /// A = A_up A_down and B*W0 = B_up B_down W0, zero matrices when absent.
    std::pair<Matrix, Matrix> effective_updates() const {
        Matrix a = spec.has_parallel() ? matmul(a_up, a_down)
                                       : Matrix::zeros(out_dim(), in_dim());
        Matrix bw0 = spec.has_sequential() ? matmul(matmul(b_up, b_down), w0)
                                           : Matrix::zeros(out_dim(), in_dim());
        return {std::move(a), std::move(bw0)};
    }

    std::size_t trainable_param_count() const {
        return adapter_param_count(spec, out_dim(), in_dim());
    }

    /// r_a*(d+k) + r_b*2d for a (d, k) layer.
    static std::size_t adapter_param_count(const AdapterSpec& spec, std::size_t d,
                                           std::size_t k) {
        return spec.parallel_rank * (d + k) + spec.sequential_rank * (2 * d);
    }
};

/// Construct a HydraLinear around frozen (w0, b0). Down-projections draw
/// N(0, sigma^2) entries (parallel first, then sequential); up-projections are
/// zero, so A = B = 0 and the layer equals the frozen map until trained.
inline HydraLinear init_hydra_linear(Matrix w0, Matrix b0, const AdapterSpec& spec,
                                     Rng& rng) {
    const std::size_t d = w0.rows();
    const std::size_t k = w0.cols();
    if (b0.rows() != 1 || b0.cols() != d) {
        throw ShapeError("init_hydra_linear: bias " + b0.shape_str() + " for weight " +
                         w0.shape_str());
    }
    if (spec.parallel_rank > std::min(d, k)) {
        throw ContractError("init_hydra_linear: parallel rank " +
                            std::to_string(spec.parallel_rank) + " exceeds min(d, k) = " +
                            std::to_string(std::min(d, k)));
    }
    if (spec.sequential_rank > d) {
        throw ContractError("init_hydra_linear: sequential rank " +
                            std::to_string(spec.sequential_rank) + " exceeds d = " +
                            std::to_string(d));
    }
    if (spec.adapter_dropout < 0.0 || spec.adapter_dropout >= 1.0) {
        throw ContractError("init_hydra_linear: adapter_dropout must be in [0, 1)");
    }
    if (spec.init_sigma < 0.0) {
        throw ContractError("init_hydra_linear: init_sigma must be >= 0");
    }

    HydraLinear layer;
    layer.w0 = std::move(w0);
    layer.b0 = std::move(b0);
    layer.spec = spec;
    if (spec.has_parallel()) {
        layer.a_down = gaussian(rng, spec.parallel_rank, k, spec.init_sigma);
        layer.a_up = Matrix::zeros(d, spec.parallel_rank);
    }
    if (spec.has_sequential()) {
        layer.b_down = gaussian(rng, spec.sequential_rank, d, spec.init_sigma);
        layer.b_up = Matrix::zeros(d, spec.sequential_rank);
    }
    return layer;
}

} // namespace hydra
