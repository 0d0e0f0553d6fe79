// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0
//
// Minibatch training loops for the micro transformer. One loop owns the model;
// everything is derived from TrainConfig.seed, so a (seed, config) pair fully
// determines the run.

#pragma once

#include "hydra/model.hpp"
#include "hydra/optim.hpp"
#include "hydra/task.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

namespace hydra {

struct RunRecord {
    std::vector<double> train_loss;    // per epoch, example-weighted mean
    std::vector<double> eval_accuracy; // per epoch, on the test split
    std::vector<double> lr_trace;      // per step
    std::vector<double> epoch_seconds; // per epoch
    std::size_t adapter_params = 0;
    std::size_t head_params = 0;
    std::size_t frozen_params = 0;
    double wall_seconds = 0.0;

    std::size_t total_params() const { return adapter_params + head_params + frozen_params; }
    double final_accuracy() const {
        return eval_accuracy.empty() ? 0.0 : eval_accuracy.back();
    }
    double mean_epoch_seconds() const {
        if (epoch_seconds.empty()) return 0.0;
        return std::accumulate(epoch_seconds.begin(), epoch_seconds.end(), 0.0) /
               double(epoch_seconds.size());
    }
};

/// Argmax accuracy of the model (current mode, dropout off) on a dataset.
/// Batches stay small: attention cost grows with the square of stacked rows.
inline double evaluate(MicroTransformer& model, const Dataset& data,
                       std::size_t batch_size = 16) {
    if (data.size() == 0) return 0.0;
    const std::size_t cls = model.cfg.cls_token();
    std::size_t correct = 0;
    Rng unused(0);
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t end = std::min(start + batch_size, data.size());
        std::vector<std::vector<int>> chunk(data.tokens.begin() + long(start),
                                            data.tokens.begin() + long(end));
        Matrix logits = model.forward(with_cls(chunk, cls), false, unused).logits_value();
        for (std::size_t i = 0; i < logits.rows(); ++i) {
            std::size_t arg = 0;
            for (std::size_t j = 1; j < logits.cols(); ++j)
                if (logits(i, j) > logits(i, arg)) arg = j;
            correct += std::size_t(int(arg) == data.labels[start + i]);
        }
    }
    return double(correct) / double(data.size());
}

namespace detail {

inline RunRecord run_training(MicroTransformer& model, const TaskSplits& task,
                              const TrainConfig& cfg) {
    cfg.validate();
    const std::size_t n = task.train.size();
    if (n == 0) throw ContractError("train: empty training split");
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = cfg.epochs * steps_per_epoch;
    std::size_t warmup_steps =
        cfg.warmup_in_epochs ? cfg.warmup * steps_per_epoch : cfg.warmup;
    if (total_steps > 0 && warmup_steps >= total_steps) warmup_steps = total_steps - 1;

    model.block_dropout = cfg.dropout;
    Rng dropout_rng(mix_seed(cfg.seed, 0xD60D));
    Optimizer opt(cfg, model.parameters().size());
    const std::size_t cls = model.cfg.cls_token();

    RunRecord rec;
    const auto counts = model.param_counts();
    rec.adapter_params = counts.adapter;
    rec.head_params = counts.head;
    rec.frozen_params = counts.frozen;

    const auto t_start = std::chrono::steady_clock::now();
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t_epoch = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(mix_seed(cfg.seed, 0x5EED, epoch));
        for (std::size_t i = n; i > 1; --i) {
            std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);
        }

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t end = std::min(start + cfg.batch_size, n);
            std::vector<std::vector<int>> tokens;
            std::vector<int> labels;
            tokens.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                tokens.push_back(task.train.tokens[order[i]]);
                labels.push_back(task.train.labels[order[i]]);
            }

            ForwardPass fp = model.forward(with_cls(tokens, cls), true, dropout_rng);
            NodeId loss = fp.tape.cross_entropy_mean(fp.logits, labels);
            const double loss_val = fp.tape.value(loss)(0, 0);
            if (!std::isfinite(loss_val)) {
                throw NumericalError("train: loss diverged to " +
                                     std::to_string(loss_val) + " at step " +
                                     std::to_string(step) + " (epoch " +
                                     std::to_string(epoch) + ")");
            }
            loss_sum += loss_val * double(end - start);

            const double lr =
                schedule_lr(cfg.schedule, step, total_steps, warmup_steps, cfg.lr);
            rec.lr_trace.push_back(lr);
            fp.tape.backward(loss);
            for (std::size_t p = 0; p < fp.trainable_leaves.size(); ++p) {
                auto [param, node] = fp.trainable_leaves[p];
                if (fp.tape.has_grad(node)) {
                    opt.apply(p, *param, fp.tape.grad(node), lr);
                }
            }
            ++step;
        }
        rec.train_loss.push_back(loss_sum / double(n));
        rec.eval_accuracy.push_back(evaluate(model, task.test));
        rec.epoch_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch)
                .count());
    }
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return rec;
}

} // namespace detail

/// Train everything except adapter branches (which are ignored) on the source
/// task. The model must be in pretrain mode.
inline RunRecord pretrain(MicroTransformer& model, const TaskSplits& task,
                          const TrainConfig& cfg) {
    if (model.mode != Mode::pretrain) {
        throw ContractError("pretrain: model must be in pretrain mode");
    }
    return detail::run_training(model, task, cfg);
}

/// Train adapters + head with the base frozen. The model must be in finetune
/// mode; base tensors are bit-identical before and after.
inline RunRecord finetune(MicroTransformer& model, const TaskSplits& task,
                          const TrainConfig& cfg) {
    if (model.mode != Mode::finetune) {
        throw ContractError("finetune: model must be in finetune mode");
    }
    return detail::run_training(model, task, cfg);
}

} // namespace hydra
