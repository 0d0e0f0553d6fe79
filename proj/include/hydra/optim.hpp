// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "hydra/matrix.hpp"

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace hydra {

enum class OptimizerKind { sgd, adamw };
enum class Schedule { constant, cosine_warmup, linear_warmup_decay };

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::adamw;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double momentum = 0.9;            // sgd only
    double beta1 = 0.9, beta2 = 0.999; // adamw only
    double eps = 1e-8;                 // adamw only
    Schedule schedule = Schedule::cosine_warmup;
    std::size_t warmup = 0;            // in warmup_in_epochs ? epochs : steps
    bool warmup_in_epochs = false;
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    double dropout = 0.0;              // residual-path dropout inside blocks

    void validate() const {
        // lr == 0 is a legal no-op run (useful for freeze checks)
        if (lr < 0.0) throw ContractError("TrainConfig: lr must be >= 0");
        if (weight_decay < 0.0) throw ContractError("TrainConfig: weight_decay >= 0");
        if (batch_size < 1) throw ContractError("TrainConfig: batch_size >= 1");
        if (dropout < 0.0 || dropout >= 1.0) {
            throw ContractError("TrainConfig: dropout must be in [0, 1)");
        }
    }
};

// ----------------------------------------------------------------------------
// Steps. Both operate in place on one parameter matrix.
// ----------------------------------------------------------------------------

/// Classic momentum SGD with L2-style decay folded into the gradient:
///   v <- momentum*v + g + weight_decay*p;  p <- p - lr*v
inline void sgd_step(Matrix& param, const Matrix& grad, Matrix& velocity, double lr,
                     double momentum, double weight_decay) {
    if (!param.same_shape(grad)) {
        throw ShapeError("sgd_step: grad " + grad.shape_str() + " vs param " +
                         param.shape_str());
    }
    if (velocity.size() == 0) velocity = Matrix::zeros(param.rows(), param.cols());
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad.data()[i] + weight_decay * param.data()[i];
        velocity.data()[i] = momentum * velocity.data()[i] + g;
        param.data()[i] -= lr * velocity.data()[i];
    }
}

struct AdamWState {
    Matrix m;
    Matrix v;
};

/// Decoupled weight decay (p <- p - lr*wd*p) followed by the bias-corrected
/// Adam update. t is the 1-based step count for this parameter.
inline void adamw_step(Matrix& param, const Matrix& grad, AdamWState& state, double lr,
                       double beta1, double beta2, double eps, double weight_decay,
                       std::size_t t) {
    if (!param.same_shape(grad)) {
        throw ShapeError("adamw_step: grad " + grad.shape_str() + " vs param " +
                         param.shape_str());
    }
    if (t < 1) throw ContractError("adamw_step: t must be >= 1");
    if (state.m.size() == 0) {
        state.m = Matrix::zeros(param.rows(), param.cols());
        state.v = Matrix::zeros(param.rows(), param.cols());
    }
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.size(); ++i) {
        param.data()[i] -= lr * weight_decay * param.data()[i];
        const double g = grad.data()[i];
        state.m.data()[i] = beta1 * state.m.data()[i] + (1.0 - beta1) * g;
        state.v.data()[i] = beta2 * state.v.data()[i] + (1.0 - beta2) * g * g;
        const double m_hat = state.m.data()[i] / bc1;
        const double v_hat = state.v.data()[i] / bc2;
        param.data()[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
}

// ----------------------------------------------------------------------------
// Learning-rate schedules (all warmup linearly from 0 to lr_max).
// ----------------------------------------------------------------------------

inline double schedule_lr(Schedule schedule, std::size_t step, std::size_t total_steps,
                          std::size_t warmup_steps, double lr_max) {
    if (step > total_steps) throw ContractError("schedule_lr: step beyond total_steps");
    if (warmup_steps >= total_steps && total_steps > 0) {
        throw ContractError("schedule_lr: warmup_steps must be < total_steps");
    }
    if (warmup_steps > 0 && step < warmup_steps) {
        return lr_max * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    const double progress =
        total_steps == warmup_steps
            ? 0.0
            : static_cast<double>(step - warmup_steps) /
                  static_cast<double>(total_steps - warmup_steps);
    switch (schedule) {
    case Schedule::constant:
        return lr_max;
    case Schedule::cosine_warmup:
        return lr_max * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    case Schedule::linear_warmup_decay:
        return lr_max * (1.0 - progress);
    }
    return lr_max;
}

// ----------------------------------------------------------------------------
// Loop-facing wrapper: per-parameter state keyed by registry order.
// ----------------------------------------------------------------------------

class Optimizer {
public:
    Optimizer(const TrainConfig& cfg, std::size_t n_params)
        : cfg_(cfg), sgd_velocity_(n_params), adamw_(n_params), steps_(n_params, 0) {}

    void apply(std::size_t index, Matrix& param, const Matrix& grad, double lr) {
        if (cfg_.optimizer == OptimizerKind::sgd) {
            sgd_step(param, grad, sgd_velocity_[index], lr, cfg_.momentum,
                     cfg_.weight_decay);
        } else {
            adamw_step(param, grad, adamw_[index], lr, cfg_.beta1, cfg_.beta2, cfg_.eps,
                       cfg_.weight_decay, ++steps_[index]);
        }
    }

private:
    TrainConfig cfg_;
    std::vector<Matrix> sgd_velocity_;
    std::vector<AdamWState> adamw_;
    std::vector<std::size_t> steps_;
};

} // namespace hydra
