// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode autodiff over the op set a small transformer needs.
// Values are computed eagerly as nodes are recorded; backward() walks the tape
// once in reverse. Gradients are materialized only for nodes that (transitively)
// carry requires_grad, so frozen parameters never see an update.

#pragma once

#include "hydra/matrix.hpp"
#include "hydra/rng.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace hydra {

enum class Op {
    leaf,
    matmul,
    add,
    add_bias_rowwise,
    relu,
    gelu,
    softmax_rows,
    layernorm_rows,
    scale,
    dropout,
    cross_entropy_mean,
    mean,
    select_rows,
};

using NodeId = int;

namespace detail {
using ArrayMap =
    Eigen::Map<Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstArrayMap = Eigen::Map<
    const Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline ArrayMap array_of(Matrix& m) {
    return ArrayMap(m.data().data(), Eigen::Index(m.rows()), Eigen::Index(m.cols()));
}
inline ConstArrayMap array_of(const Matrix& m) {
    return ConstArrayMap(m.data().data(), Eigen::Index(m.rows()), Eigen::Index(m.cols()));
}

using RowMap = Eigen::Map<Eigen::ArrayXd>;
using ConstRowMap = Eigen::Map<const Eigen::ArrayXd>;

inline RowMap row_of(Matrix& m, std::size_t i) {
    return RowMap(m.row_ptr(i), Eigen::Index(m.cols()));
}
inline ConstRowMap row_of(const Matrix& m, std::size_t i) {
    return ConstRowMap(m.row_ptr(i), Eigen::Index(m.cols()));
}
} // namespace detail

class Tape {
public:
    struct Node {
        Op op = Op::leaf;
        Matrix value;
        std::vector<NodeId> parents;
        bool requires_grad = false;
        // per-op attributes
        bool trans_a = false;
        bool trans_b = false;            // matmul layout flags
        double scalar = 0.0;             // scale factor / dropout keep scale
        double eps = 0.0;                // layernorm epsilon
        Matrix cache;                    // dropout mask or softmax probs
        std::vector<int> labels;         // cross_entropy_mean targets
        std::vector<std::size_t> rows;   // select_rows indices
    };

    NodeId leaf(Matrix value, bool requires_grad) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    /// op(a) * op(b) with optional transposes, the GEMM-style workhorse.
    NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false) {
        Node n;
        n.op = Op::matmul;
        n.parents = {a, b};
        n.trans_a = trans_a;
        n.trans_b = trans_b;
        n.value = gemm(value(a), trans_a, value(b), trans_b);
        return push(std::move(n));
    }

    NodeId add(NodeId a, NodeId b) {
        Node n;
        n.op = Op::add;
        n.parents = {a, b};
        n.value = value(a) + value(b);
        return push(std::move(n));
    }

    /// x is (n, d), bias is (1, d); bias is added to every row of x.
    NodeId add_bias_rowwise(NodeId x, NodeId bias) {
        const Matrix& xv = value(x);
        const Matrix& bv = value(bias);
        if (bv.rows() != 1 || bv.cols() != xv.cols()) {
            throw ShapeError("add_bias_rowwise: bias " + bv.shape_str() +
                             " does not broadcast over " + xv.shape_str());
        }
        Node n;
        n.op = Op::add_bias_rowwise;
        n.parents = {x, bias};
        n.value = xv;
        for (std::size_t i = 0; i < xv.rows(); ++i)
            for (std::size_t j = 0; j < xv.cols(); ++j) n.value(i, j) += bv(0, j);
        return push(std::move(n));
    }

    NodeId relu(NodeId x) {
        Node n;
        n.op = Op::relu;
        n.parents = {x};
        n.value = value(x);
        for (auto& v : n.value.data()) v = v > 0.0 ? v : 0.0;
        return push(std::move(n));
    }

    // tanh-approximated GELU: 0.5x(1 + tanh(k(x + c x^3))),
    // k = sqrt(2/pi), c = 0.044715. Closed-form derivative in backward().
    NodeId gelu(NodeId x) {
        Node n;
        n.op = Op::gelu;
        n.parents = {x};
        n.value = value(x);
        auto a = detail::array_of(n.value);
        // tanh(u) as 1 - 2/(exp(2u) + 1): exp vectorizes for doubles, tanh not
        const Eigen::ArrayXXd t =
            1.0 - 2.0 / ((2.0 * kGeluK * (a + kGeluC * a.cube())).exp() + 1.0);
        a = 0.5 * a * (1.0 + t);
        return push(std::move(n));
    }

    /// Row-wise softmax with row-max subtraction for stability.
    NodeId softmax_rows(NodeId x) {
        Node n;
        n.op = Op::softmax_rows;
        n.parents = {x};
        n.value = value(x);
        for (std::size_t i = 0; i < n.value.rows(); ++i) {
            auto row = detail::row_of(n.value, i);
            row = (row - row.maxCoeff()).exp();
            // Vectorized exp clamps its argument near -709 and emits subnormals
            // for heavily masked scores; flush them to exact zeros so masked
            // attention entries stay 0 and downstream GEMMs stay off the
            // subnormal slow path.
            row = (row < 1e-300).select(0.0, row);
            row /= row.sum();
        }
        return push(std::move(n));
    }

    /// Per-row normalization to zero mean / unit variance, then gain and bias
    /// (both (1, d)). eps sits inside the square root.
    NodeId layernorm_rows(NodeId x, NodeId gain, NodeId bias, double eps = 1e-5) {
        const Matrix& xv = value(x);
        const Matrix& gv = value(gain);
        const Matrix& bv = value(bias);
        if (gv.rows() != 1 || gv.cols() != xv.cols() || bv.rows() != 1 ||
            bv.cols() != xv.cols()) {
            throw ShapeError("layernorm_rows: gain/bias must be (1, " +
                             std::to_string(xv.cols()) + ")");
        }
        Node n;
        n.op = Op::layernorm_rows;
        n.parents = {x, gain, bias};
        n.eps = eps;
        n.value = Matrix(xv.rows(), xv.cols());
        const std::size_t d = xv.cols();
        for (std::size_t i = 0; i < xv.rows(); ++i) {
            double mean = 0.0;
            for (std::size_t j = 0; j < d; ++j) mean += xv(i, j);
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double c = xv(i, j) - mean;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const double inv_std = 1.0 / std::sqrt(var + eps);
            for (std::size_t j = 0; j < d; ++j)
                n.value(i, j) = (xv(i, j) - mean) * inv_std * gv(0, j) + bv(0, j);
        }
        return push(std::move(n));
    }

    NodeId scale(NodeId x, double factor) {
        Node n;
        n.op = Op::scale;
        n.parents = {x};
        n.scalar = factor;
        n.value = value(x) * factor;
        return push(std::move(n));
    }

    /// Inverted dropout: keep with probability 1-p and scale kept entries by
    /// 1/(1-p). Identity (the input node itself) when not training or p == 0.
    NodeId dropout(NodeId x, double p, Rng& rng, bool training) {
        if (p < 0.0 || p >= 1.0) throw ContractError("dropout: p must be in [0, 1)");
        if (!training || p == 0.0) return x;
        Node n;
        n.op = Op::dropout;
        n.parents = {x};
        n.scalar = 1.0 / (1.0 - p);
        const Matrix& xv = value(x);
        n.cache = Matrix(xv.rows(), xv.cols());
        n.value = Matrix(xv.rows(), xv.cols());
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double keep = rng.next_uniform() >= p ? 1.0 : 0.0;
            n.cache.data()[i] = keep;
            n.value.data()[i] = xv.data()[i] * keep * n.scalar;
        }
        return push(std::move(n));
    }

    /// Fused log-softmax + negative log likelihood, averaged over rows.
    /// Gradient of the logits is (softmax - onehot) / batch.
    NodeId cross_entropy_mean(NodeId logits, std::vector<int> labels) {
        const Matrix& lv = value(logits);
        if (labels.size() != lv.rows()) {
            throw ShapeError("cross_entropy_mean: " + std::to_string(labels.size()) +
                             " labels for " + std::to_string(lv.rows()) + " rows");
        }
        for (int y : labels) {
            if (y < 0 || static_cast<std::size_t>(y) >= lv.cols()) {
                throw ContractError("cross_entropy_mean: label out of range");
            }
        }
        Node n;
        n.op = Op::cross_entropy_mean;
        n.parents = {logits};
        n.labels = std::move(labels);
        n.cache = Matrix(lv.rows(), lv.cols()); // row-wise softmax probabilities
        double loss = 0.0;
        for (std::size_t i = 0; i < lv.rows(); ++i) {
            double mx = lv(i, 0);
            for (std::size_t j = 1; j < lv.cols(); ++j) mx = std::max(mx, lv(i, j));
            double sum = 0.0;
            for (std::size_t j = 0; j < lv.cols(); ++j) sum += std::exp(lv(i, j) - mx);
            const double log_z = mx + std::log(sum);
            for (std::size_t j = 0; j < lv.cols(); ++j)
                n.cache(i, j) = std::exp(lv(i, j) - log_z);
            loss -= lv(i, static_cast<std::size_t>(n.labels[i])) - log_z;
        }
        n.value = Matrix(1, 1);
        n.value(0, 0) = loss / static_cast<double>(lv.rows());
        return push(std::move(n));
    }

    /// Mean over all entries; value is 1x1.
    NodeId mean(NodeId x) {
        Node n;
        n.op = Op::mean;
        n.parents = {x};
        const Matrix& xv = value(x);
        double acc = 0.0;
        for (double v : xv.data()) acc += v;
        n.value = Matrix(1, 1);
        n.value(0, 0) = acc / static_cast<double>(xv.size());
        return push(std::move(n));
    }

    /// Gather rows by index (duplicates allowed); backward scatter-adds.
    NodeId select_rows(NodeId x, std::vector<std::size_t> rows) {
        const Matrix& xv = value(x);
        for (std::size_t r : rows) {
            if (r >= xv.rows()) throw ContractError("select_rows: row index out of range");
        }
        Node n;
        n.op = Op::select_rows;
        n.parents = {x};
        n.value = Matrix(rows.size(), xv.cols());
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < xv.cols(); ++j) n.value(i, j) = xv(rows[i], j);
        n.rows = std::move(rows);
        return push(std::move(n));
    }

    const Matrix& value(NodeId id) const { return nodes_[check(id)].value; }
    Op op(NodeId id) const { return nodes_[check(id)].op; }
    bool requires_grad(NodeId id) const { return nodes_[check(id)].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    bool has_grad(NodeId id) const {
        return static_cast<std::size_t>(check(id)) < grad_set_.size() && grad_set_[id];
    }

    const Matrix& grad(NodeId id) const {
        if (!has_grad(id)) {
            throw ContractError("grad: node " + std::to_string(id) +
                                " has no materialized gradient");
        }
        return grads_[id];
    }

    /// Reverse pass from a scalar loss. Fills gradients for every node on the
    /// path from the loss to a requires_grad leaf; frozen leaves get nothing.
    void backward(NodeId loss) {
        const Node& ln = nodes_[check(loss)];
        if (ln.value.rows() != 1 || ln.value.cols() != 1) {
            throw ContractError("backward: loss must be 1x1, got " + ln.value.shape_str());
        }
        grads_.assign(nodes_.size(), Matrix());
        grad_set_.assign(nodes_.size(), 0);
        if (!ln.requires_grad) return; // nothing trainable feeds the loss
        accumulate(loss, Matrix::filled(1, 1, 1.0));

        for (NodeId id = loss; id >= 0; --id) {
            if (!grad_set_[id] || nodes_[id].op == Op::leaf) continue;
            backprop_node(id);
        }
    }

private:
    static constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double kGeluC = 0.044715;

    std::vector<Node> nodes_;
    std::vector<Matrix> grads_;
    std::vector<char> grad_set_;

    NodeId check(NodeId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
            throw ContractError("tape: invalid node id " + std::to_string(id));
        }
        return id;
    }

    NodeId push(Node n) {
        for (NodeId p : n.parents) {
            check(p);
            n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
        }
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    void accumulate(NodeId id, Matrix g) {
        if (!nodes_[id].requires_grad) return;
        if (!grad_set_[id]) {
            grads_[id] = std::move(g);
            grad_set_[id] = 1;
        } else {
            detail::array_of(grads_[id]) += detail::array_of(g);
        }
    }

    void backprop_node(NodeId id) {
        const Node& n = nodes_[id];
        const Matrix& g = grads_[id];
        switch (n.op) {
        case Op::matmul: {
            const Matrix& a = nodes_[n.parents[0]].value;
            const Matrix& b = nodes_[n.parents[1]].value;
            if (nodes_[n.parents[0]].requires_grad) {
                // d(op(a)) = g * op(b)^T, undone through the layout flag
                Matrix da = n.trans_b ? gemm(g, false, b, false) : gemm(g, false, b, true);
                accumulate(n.parents[0], n.trans_a ? transpose(da) : std::move(da));
            }
            if (nodes_[n.parents[1]].requires_grad) {
                Matrix db = n.trans_a ? gemm(a, false, g, false) : gemm(a, true, g, false);
                accumulate(n.parents[1], n.trans_b ? transpose(db) : std::move(db));
            }
            break;
        }
        case Op::add:
            accumulate(n.parents[0], g);
            accumulate(n.parents[1], g);
            break;
        case Op::add_bias_rowwise: {
            accumulate(n.parents[0], g);
            if (nodes_[n.parents[1]].requires_grad) {
                Matrix gb(1, g.cols());
                for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
                accumulate(n.parents[1], std::move(gb));
            }
            break;
        }
        case Op::relu: {
            const Matrix& x = nodes_[n.parents[0]].value;
            Matrix gx = g;
            for (std::size_t i = 0; i < gx.size(); ++i)
                if (x.data()[i] <= 0.0) gx.data()[i] = 0.0;
            accumulate(n.parents[0], std::move(gx));
            break;
        }
        case Op::gelu: {
            const Matrix& x = nodes_[n.parents[0]].value;
            Matrix gx = g;
            auto xa = detail::array_of(x);
            auto ga = detail::array_of(gx);
            const Eigen::ArrayXXd t =
                1.0 - 2.0 / ((2.0 * kGeluK * (xa + kGeluC * xa.cube())).exp() + 1.0);
            ga *= 0.5 * (1.0 + t) +
                  0.5 * xa * (1.0 - t.square()) * (kGeluK * (1.0 + 3.0 * kGeluC * xa.square()));
            accumulate(n.parents[0], std::move(gx));
            break;
        }
        case Op::softmax_rows: {
            const Matrix& s = n.value;
            Matrix gx = g;
            for (std::size_t i = 0; i < s.rows(); ++i) {
                auto srow = detail::row_of(s, i);
                auto grow = detail::row_of(gx, i);
                grow = srow * (grow - (grow * srow).sum());
            }
            accumulate(n.parents[0], std::move(gx));
            break;
        }
        case Op::layernorm_rows: {
            const Matrix& x = nodes_[n.parents[0]].value;
            const Matrix& gain = nodes_[n.parents[1]].value;
            const std::size_t d = x.cols();
            Matrix gx(x.rows(), d);
            Matrix ggain(1, d);
            Matrix gbias(1, d);
            for (std::size_t i = 0; i < x.rows(); ++i) {
                double mean = 0.0;
                for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
                mean /= static_cast<double>(d);
                double var = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double c = x(i, j) - mean;
                    var += c * c;
                }
                var /= static_cast<double>(d);
                const double inv_std = 1.0 / std::sqrt(var + n.eps);
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double xhat = (x(i, j) - mean) * inv_std;
                    const double dxhat = g(i, j) * gain(0, j);
                    ggain(0, j) += g(i, j) * xhat;
                    gbias(0, j) += g(i, j);
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                }
                mean_dxhat /= static_cast<double>(d);
                mean_dxhat_xhat /= static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const double xhat = (x(i, j) - mean) * inv_std;
                    const double dxhat = g(i, j) * gain(0, j);
                    gx(i, j) = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
            accumulate(n.parents[0], std::move(gx));
            accumulate(n.parents[1], std::move(ggain));
            accumulate(n.parents[2], std::move(gbias));
            break;
        }
        case Op::scale:
            accumulate(n.parents[0], g * n.scalar);
            break;
        case Op::dropout: {
            Matrix gx = g;
            for (std::size_t i = 0; i < gx.size(); ++i)
                gx.data()[i] *= n.cache.data()[i] * n.scalar;
            accumulate(n.parents[0], std::move(gx));
            break;
        }
        case Op::cross_entropy_mean: {
            const double gs = g(0, 0) / static_cast<double>(n.cache.rows());
            Matrix gx = n.cache;
            for (std::size_t i = 0; i < gx.rows(); ++i)
                gx(i, static_cast<std::size_t>(n.labels[i])) -= 1.0;
            for (auto& v : gx.data()) v *= gs;
            accumulate(n.parents[0], std::move(gx));
            break;
        }
        case Op::mean: {
            const Matrix& x = nodes_[n.parents[0]].value;
            const double gs = g(0, 0) / static_cast<double>(x.size());
            accumulate(n.parents[0], Matrix::filled(x.rows(), x.cols(), gs));
            break;
        }
        case Op::select_rows: {
            const Matrix& x = nodes_[n.parents[0]].value;
            Matrix gx(x.rows(), x.cols());
            for (std::size_t i = 0; i < n.rows.size(); ++i)
                for (std::size_t j = 0; j < x.cols(); ++j) gx(n.rows[i], j) += g(i, j);
            accumulate(n.parents[0], std::move(gx));
            break;
        }
        case Op::leaf:
            break;
        }
    }
};

} // namespace hydra
