// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0
//
// A micro transformer encoder: token + learned positional embeddings, pre-norm
// blocks (x + MSA(LN(x)), then + MLP(LN(x))), a reserved [CLS] position 0, and
// a linear classification head on the final [CLS] embedding. Any of the block
// linears can carry Hydra adaptation branches, selected by a placement policy.
//
// Batches are processed as one (batch*seq_len, d) row-major matrix; attention
// uses an additive block-diagonal mask so sequences never attend across each
// other, and per-head slices are taken with constant selector matrices.

#pragma once

#include "hydra/adapter.hpp"
#include "hydra/autodiff.hpp"
#include "hydra/matrix.hpp"
#include "hydra/rng.hpp"

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace hydra {

struct PlacementSet {
    bool mlp_out = false;   // final linear of the MLP block
    bool msa_proj = false;  // MSA output projection
    bool msa_qkv = false;   // query/key/value projections

    bool any() const { return mlp_out || msa_proj || msa_qkv; }

    static PlacementSet none() { return {}; }
    static PlacementSet mlp() { return {true, false, false}; }
};

enum class Mode { pretrain, finetune, inference };

enum class Role { frozen, adapter, head };

inline const char* role_name(Role r) {
    switch (r) {
    case Role::frozen: return "frozen";
    case Role::adapter: return "adapter";
    case Role::head: return "head";
    }
    return "?";
}

struct ModelConfig {
    std::size_t embed_dim = 64;
    std::size_t mlp_hidden = 0; // 0 = 4 * embed_dim
    std::size_t heads = 4;
    std::size_t blocks = 4;
    std::size_t seq_len = 17;   // position 0 is [CLS]
    std::size_t num_classes = 4;
    std::size_t vocab = 32;     // last id (vocab - 1) is reserved for [CLS]
    PlacementSet placement = PlacementSet::mlp();
    AdapterSpec adapter;

    std::size_t resolved_mlp_hidden() const {
        return mlp_hidden == 0 ? 4 * embed_dim : mlp_hidden;
    }

    std::size_t cls_token() const { return vocab - 1; }

    void validate() const {
        if (embed_dim == 0 || heads == 0 || blocks == 0 || num_classes < 2 || vocab < 2) {
            throw ContractError("ModelConfig: dimensions must be positive, >=2 classes");
        }
        if (embed_dim % heads != 0) {
            throw ContractError("ModelConfig: embed_dim " + std::to_string(embed_dim) +
                                " not divisible by heads " + std::to_string(heads));
        }
        if (seq_len < 1) throw ContractError("ModelConfig: seq_len must be >= 1");
    }
};

/// Values of the last adapted layer's branch outputs at the [CLS] rows.
/// pretrained + parallel + sequential == total (bias terms ride inside the
/// pretrained and sequential components, matching the three-branch sum).
struct BranchCapture {
    Matrix pretrained;       // f(x) = W0 x + b0
    Matrix pre_bias;         // W0 x
    Matrix parallel;         // s * A x
    Matrix sequential;       // s * B f(x)
    Matrix total;            // layer output
    Matrix bias_pretrained;  // b0             (1, d)
    Matrix bias_sequential;  // s * B b0       (1, d)
};

/// One forward pass: the tape (for backward), the logits node, and the leaf
/// ids of every parameter that is trainable in the current mode.
struct ForwardPass {
    Tape tape;
    NodeId logits = -1;
    std::vector<std::pair<Matrix*, NodeId>> trainable_leaves;
    std::optional<BranchCapture> branches;

    const Matrix& logits_value() const { return tape.value(logits); }
};

class MicroTransformer {
public:
    struct BlockParams {
        Matrix ln1_gain, ln1_bias, ln2_gain, ln2_bias; // (1, d)
        HydraLinear wq, wk, wv, wo;                    // (d, d)
        HydraLinear mlp_in;                            // (hidden, d)
        HydraLinear mlp_out;                           // (d, hidden)
    };

    ModelConfig cfg;
    Mode mode = Mode::pretrain;
    double block_dropout = 0.0; // residual-path dropout rate while training

    Matrix tok_embed; // (vocab, d)
    Matrix pos_embed; // (seq_len, d)
    std::vector<BlockParams> blocks;
    Matrix head_w; // (classes, d)
    Matrix head_b; // (1, classes)

    // ------------------------------------------------------------------
    // Construction
    // ------------------------------------------------------------------

    /// Base weights N(0, 0.02^2), layernorm gains 1, biases 0; adapters
    /// installed per cfg.placement with cfg.adapter. Same seed, same model.
    static MicroTransformer build(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        const std::size_t d = cfg.embed_dim;
        const std::size_t hidden = cfg.resolved_mlp_hidden();
        constexpr double sigma = 0.02;

        MicroTransformer m;
        m.cfg = cfg;
        m.tok_embed = gaussian(rng, cfg.vocab, d, sigma);
        m.pos_embed = gaussian(rng, cfg.seq_len, d, sigma);
        m.blocks.resize(cfg.blocks);
        for (auto& blk : m.blocks) {
            blk.ln1_gain = Matrix::filled(1, d, 1.0);
            blk.ln1_bias = Matrix::zeros(1, d);
            blk.ln2_gain = Matrix::filled(1, d, 1.0);
            blk.ln2_bias = Matrix::zeros(1, d);
            for (HydraLinear* lin : {&blk.wq, &blk.wk, &blk.wv, &blk.wo}) {
                lin->w0 = gaussian(rng, d, d, sigma);
                lin->b0 = Matrix::zeros(1, d);
            }
            blk.mlp_in.w0 = gaussian(rng, hidden, d, sigma);
            blk.mlp_in.b0 = Matrix::zeros(1, hidden);
            blk.mlp_out.w0 = gaussian(rng, d, hidden, sigma);
            blk.mlp_out.b0 = Matrix::zeros(1, d);
        }
        m.head_w = gaussian(rng, cfg.num_classes, d, sigma);
        m.head_b = Matrix::zeros(1, cfg.num_classes);
        if (cfg.placement.any() && cfg.adapter.has_adapter()) {
            m.install_adapters(cfg.adapter, cfg.placement, rng);
        }
        return m;
    }

    /// (Re)install adaptation branches on the placed layers. Draw order:
    /// blocks ascending; within a block q, k, v, proj, mlp_out.
    void install_adapters(const AdapterSpec& spec, const PlacementSet& placement,
                          Rng& rng) {
        cfg.adapter = spec;
        cfg.placement = placement;
        for (auto& blk : blocks) {
            if (placement.msa_qkv) {
                for (HydraLinear* lin : {&blk.wq, &blk.wk, &blk.wv}) reinit(*lin, spec, rng);
            }
            if (placement.msa_proj) reinit(blk.wo, spec, rng);
            if (placement.mlp_out) reinit(blk.mlp_out, spec, rng);
        }
    }

    void reinit_head(Rng& rng) {
        head_w = gaussian(rng, cfg.num_classes, cfg.embed_dim, 0.02);
        head_b = Matrix::zeros(1, cfg.num_classes);
    }

    void set_mode(Mode new_mode) { mode = new_mode; }

    // ------------------------------------------------------------------
    // Parameter registry
    // ------------------------------------------------------------------

    struct ParamRef {
        std::string name;
        Matrix* matrix;
        Role role;
    };

    std::vector<ParamRef> parameters() {
        std::vector<ParamRef> out;
        out.push_back({"embed.tok", &tok_embed, Role::frozen});
        out.push_back({"embed.pos", &pos_embed, Role::frozen});
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            auto& blk = blocks[i];
            const std::string p = "blk" + std::to_string(i) + ".";
            out.push_back({p + "ln1.gain", &blk.ln1_gain, Role::frozen});
            out.push_back({p + "ln1.bias", &blk.ln1_bias, Role::frozen});
            push_linear(out, p + "msa.q.", blk.wq);
            push_linear(out, p + "msa.k.", blk.wk);
            push_linear(out, p + "msa.v.", blk.wv);
            push_linear(out, p + "msa.proj.", blk.wo);
            out.push_back({p + "ln2.gain", &blk.ln2_gain, Role::frozen});
            out.push_back({p + "ln2.bias", &blk.ln2_bias, Role::frozen});
            push_linear(out, p + "mlp.in.", blk.mlp_in);
            push_linear(out, p + "mlp.out.", blk.mlp_out);
        }
        out.push_back({"head.w", &head_w, Role::head});
        out.push_back({"head.b", &head_b, Role::head});
        return out;
    }

    bool trainable_in_mode(Role role) const {
        switch (mode) {
        case Mode::pretrain: return role != Role::adapter;
        case Mode::finetune: return role != Role::frozen;
        case Mode::inference: return false;
        }
        return false;
    }

    struct ParamCounts {
        std::size_t frozen = 0;
        std::size_t adapter = 0;
        std::size_t head = 0;
        std::size_t total() const { return frozen + adapter + head; }
    };

    ParamCounts param_counts() {
        ParamCounts c;
        for (const auto& p : parameters()) {
            const std::size_t n = p.matrix->size();
            if (p.role == Role::frozen) c.frozen += n;
            else if (p.role == Role::adapter) c.adapter += n;
            else c.head += n;
        }
        return c;
    }

    // ------------------------------------------------------------------
    // Forward
    // ------------------------------------------------------------------

    /// tokens: batch of id sequences, each exactly seq_len long with the
    /// [CLS] id at position 0. `training` enables dropout (ignored in
    /// inference mode). Gradient leaves are registered per the current mode.
    ForwardPass forward(const std::vector<std::vector<int>>& tokens, bool training,
                        Rng& dropout_rng, bool capture_branches = false) {
        const std::size_t batch = tokens.size();
        const std::size_t len = cfg.seq_len;
        if (batch == 0) throw ContractError("forward: empty batch");
        std::vector<std::size_t> flat;
        flat.reserve(batch * len);
        for (const auto& seq : tokens) {
            if (seq.size() != len) {
                throw ContractError("forward: sequence length " +
                                    std::to_string(seq.size()) + " != seq_len " +
                                    std::to_string(len));
            }
            for (int id : seq) {
                if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab) {
                    throw ContractError("forward: token id " + std::to_string(id) +
                                        " out of range [0, " + std::to_string(cfg.vocab) +
                                        ")");
                }
                flat.push_back(static_cast<std::size_t>(id));
            }
        }

        const bool train_eff = training && mode != Mode::inference;
        const bool use_adapters = mode != Mode::pretrain;
        const bool base_trainable = mode == Mode::pretrain;
        const bool adapters_trainable = mode == Mode::finetune;
        const bool head_trainable = mode != Mode::inference;

        ForwardPass fp;
        Tape& tape = fp.tape;

        auto leaf = [&](Matrix& m, bool trainable) {
            NodeId id = tape.leaf(m, trainable);
            if (trainable) fp.trainable_leaves.push_back({&m, id});
            return id;
        };

        // Embedding: gather token rows, add tiled positional rows.
        NodeId tok_leaf = leaf(tok_embed, base_trainable);
        NodeId pos_leaf = leaf(pos_embed, base_trainable);
        NodeId x = tape.select_rows(tok_leaf, flat);
        NodeId tile = tape.leaf(tile_matrix(batch, len), false);
        x = tape.add(x, tape.matmul(tile, pos_leaf));

        NodeId mask = tape.leaf(attention_mask(batch, len), false);
        const std::size_t d = cfg.embed_dim;
        const std::size_t dh = d / cfg.heads;
        const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

        // Identify the deepest adapted layer for branch capture.
        const HydraLinear* capture_layer = capture_branches ? last_adapted_layer() : nullptr;
        if (capture_branches && capture_layer == nullptr) {
            throw ContractError("forward: branch capture requested on a model with no "
                                "adapted layers");
        }
        HydraForwardNodes captured;

        auto linear = [&](HydraLinear& lin, NodeId input) {
            HydraLeafIds ids;
            ids.w0 = leaf(lin.w0, base_trainable);
            ids.b0 = leaf(lin.b0, base_trainable);
            HydraForwardNodes nodes;
            if (use_adapters && lin.spec.has_adapter()) {
                if (lin.spec.has_parallel()) {
                    ids.a_up = leaf(lin.a_up, adapters_trainable);
                    ids.a_down = leaf(lin.a_down, adapters_trainable);
                }
                if (lin.spec.has_sequential()) {
                    ids.b_up = leaf(lin.b_up, adapters_trainable);
                    ids.b_down = leaf(lin.b_down, adapters_trainable);
                }
                nodes = lin.forward(tape, ids, input, train_eff, dropout_rng);
            } else {
                nodes.pre_bias = tape.matmul(input, ids.w0, false, true);
                nodes.pretrained = tape.add_bias_rowwise(nodes.pre_bias, ids.b0);
                nodes.out = nodes.pretrained;
            }
            if (&lin == capture_layer) captured = nodes;
            return nodes.out;
        };

        for (auto& blk : blocks) {
            // MSA sub-block
            NodeId ln1_g = leaf(blk.ln1_gain, base_trainable);
            NodeId ln1_b = leaf(blk.ln1_bias, base_trainable);
            NodeId normed = tape.layernorm_rows(x, ln1_g, ln1_b);
            NodeId q = linear(blk.wq, normed);
            NodeId k = linear(blk.wk, normed);
            NodeId v = linear(blk.wv, normed);
            NodeId ctx = -1;
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                NodeId sel = tape.leaf(head_selector(h, d, dh), false);
                NodeId qh = tape.matmul(q, sel);
                NodeId kh = tape.matmul(k, sel);
                NodeId vh = tape.matmul(v, sel);
                NodeId scores = tape.scale(tape.matmul(qh, kh, false, true), attn_scale);
                NodeId attn = tape.softmax_rows(tape.add(scores, mask));
                NodeId ctx_h = tape.matmul(tape.matmul(attn, vh), sel, false, true);
                ctx = h == 0 ? ctx_h : tape.add(ctx, ctx_h);
            }
            NodeId proj = linear(blk.wo, ctx);
            proj = tape.dropout(proj, block_dropout, dropout_rng, train_eff);
            x = tape.add(x, proj);

            // MLP sub-block
            NodeId ln2_g = leaf(blk.ln2_gain, base_trainable);
            NodeId ln2_b = leaf(blk.ln2_bias, base_trainable);
            NodeId normed2 = tape.layernorm_rows(x, ln2_g, ln2_b);
            NodeId hid = tape.gelu(linear(blk.mlp_in, normed2));
            NodeId out = linear(blk.mlp_out, hid);
            out = tape.dropout(out, block_dropout, dropout_rng, train_eff);
            x = tape.add(x, out);
        }

        std::vector<std::size_t> cls_rows(batch);
        for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * len;
        NodeId cls = tape.select_rows(x, cls_rows);
        NodeId hw = leaf(head_w, head_trainable);
        NodeId hb = leaf(head_b, head_trainable);
        fp.logits = tape.add_bias_rowwise(tape.matmul(cls, hw, false, true), hb);

        if (capture_layer != nullptr) {
            fp.branches = extract_capture(tape, captured, *capture_layer, cls_rows, d);
        }
        return fp;
    }

    /// Eval-mode logits (no dropout, no gradient bookkeeping needed by caller).
    Matrix logits_eval(const std::vector<std::vector<int>>& tokens) {
        Rng rng(0); // never consumed: dropout is off outside training
        return forward(tokens, false, rng).logits_value();
    }

    // ------------------------------------------------------------------
    // Merging
    // ------------------------------------------------------------------

    /// Fold every adapted layer into its merged affine map. The returned model
    /// has zero adapter parameters and reproduces inference-mode logits.
    MicroTransformer fold_all() const {
        MicroTransformer folded = *this;
        for (auto& blk : folded.blocks) {
            for (HydraLinear* lin :
                 {&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.mlp_in, &blk.mlp_out}) {
                if (!lin->spec.has_adapter()) continue;
                MergedLinear merged = lin->fold();
                lin->w0 = std::move(merged.w);
                lin->b0 = std::move(merged.b);
                lin->a_up = Matrix();
                lin->a_down = Matrix();
                lin->b_up = Matrix();
                lin->b_down = Matrix();
                lin->spec = AdapterSpec::none();
            }
        }
        folded.cfg.adapter = AdapterSpec::none();
        folded.cfg.placement = PlacementSet::none();
        folded.mode = Mode::inference;
        return folded;
    }

    /// Adapted layers in network order (block-major; q, k, v, proj, mlp_out).
    std::vector<HydraLinear*> adapted_layers() {
        std::vector<HydraLinear*> out;
        for (auto& blk : blocks) {
            for (HydraLinear* lin : {&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.mlp_out}) {
                if (lin->spec.has_adapter()) out.push_back(lin);
            }
        }
        return out;
    }

private:
    static void push_linear(std::vector<ParamRef>& out, const std::string& prefix,
                            HydraLinear& lin) {
        out.push_back({prefix + "w0", &lin.w0, Role::frozen});
        out.push_back({prefix + "b0", &lin.b0, Role::frozen});
        if (lin.spec.has_parallel()) {
            out.push_back({prefix + "a_up", &lin.a_up, Role::adapter});
            out.push_back({prefix + "a_down", &lin.a_down, Role::adapter});
        }
        if (lin.spec.has_sequential()) {
            out.push_back({prefix + "b_up", &lin.b_up, Role::adapter});
            out.push_back({prefix + "b_down", &lin.b_down, Role::adapter});
        }
    }

    static void reinit(HydraLinear& lin, const AdapterSpec& spec, Rng& rng) {
        HydraLinear fresh =
            init_hydra_linear(std::move(lin.w0), std::move(lin.b0), spec, rng);
        lin = std::move(fresh);
    }

    const HydraLinear* last_adapted_layer() const {
        for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
            for (const HydraLinear* lin :
                 {&it->mlp_out, &it->wo, &it->wv, &it->wk, &it->wq}) {
                if (lin->spec.has_adapter()) return lin;
            }
        }
        return nullptr;
    }

    static Matrix tile_matrix(std::size_t batch, std::size_t len) {
        Matrix t(batch * len, len);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t l = 0; l < len; ++l) t(b * len + l, l) = 1.0;
        return t;
    }

    // 0 within a sequence's block, -1e9 across sequences; softmax_rows turns
    // the masked entries into exact zeros after row-max subtraction.
    static Matrix attention_mask(std::size_t batch, std::size_t len) {
        const std::size_t n = batch * len;
        Matrix m = Matrix::filled(n, n, -1e9);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < len; ++i)
                for (std::size_t j = 0; j < len; ++j)
                    m(b * len + i, b * len + j) = 0.0;
        return m;
    }

    static Matrix head_selector(std::size_t head, std::size_t d, std::size_t dh) {
        Matrix sel(d, dh);
        for (std::size_t j = 0; j < dh; ++j) sel(head * dh + j, j) = 1.0;
        return sel;
    }

    static BranchCapture extract_capture(const Tape& tape, const HydraForwardNodes& nodes,
                                         const HydraLinear& layer,
                                         const std::vector<std::size_t>& cls_rows,
                                         std::size_t d) {
        auto take_rows = [&](NodeId id, std::size_t width) {
            Matrix out(cls_rows.size(), width);
            if (id < 0) return out;
            const Matrix& v = tape.value(id);
            for (std::size_t i = 0; i < cls_rows.size(); ++i)
                for (std::size_t j = 0; j < width; ++j) out(i, j) = v(cls_rows[i], j);
            return out;
        };
        BranchCapture cap;
        cap.pretrained = take_rows(nodes.pretrained, d);
        cap.pre_bias = take_rows(nodes.pre_bias, d);
        cap.parallel = take_rows(nodes.parallel, d);
        cap.sequential = take_rows(nodes.sequential, d);
        cap.total = take_rows(nodes.out, d);
        cap.bias_pretrained = layer.b0;
        cap.bias_sequential = Matrix::zeros(1, d);
        if (layer.spec.has_sequential()) {
            Matrix b_eff = matmul(layer.b_up, layer.b_down);
            cap.bias_sequential =
                gemm(layer.b0, false, b_eff, true) * layer.spec.scaling;
        }
        return cap;
    }
};

} // namespace hydra
