// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0
//
// The head-to-head experiment grid: pretrain once on the source task, then
// fine-tune every (variant, seed) cell on the shifted target task. Cells are
// independent (own model copy, own substreams), so they may run on worker
// threads without changing any number; HYDRA_PEFT_THREADS caps the pool.

#pragma once

#include "hydra/analysis.hpp"
#include "hydra/config.hpp"
#include "hydra/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace hydra {

/// Training churns through short-lived multi-hundred-KB gradient buffers;
/// glibc serves those via mmap/munmap by default, which roughly doubles step
/// time. Long-running binaries (CLI, acceptance suite) call this once to keep
/// such blocks on the heap. No effect on other platforms.
inline void tune_allocator_for_training() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

struct CellResult {
    std::string variant;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double accuracy = 0.0;
    std::size_t adapter_params = 0;
    std::size_t head_params = 0;
    std::size_t total_params = 0;
    double sec_per_epoch = 0.0;
    RunRecord record;
};

struct VariantSummary {
    std::string variant;
    std::size_t adapter_params = 0;
    double trainable_millions = 0.0;
    double mean_accuracy = 0.0;
    double std_accuracy = 0.0; // population std over seeds
    double sec_per_epoch = 0.0;
    std::size_t ok_cells = 0;
    std::size_t cells = 0;
};

struct BenchResult {
    RunRecord pretrain_record;
    double source_accuracy = 0.0;
    std::vector<CellResult> cells; // variant-major, seeds inner
    std::vector<VariantSummary> summaries;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

} // namespace detail

inline std::size_t bench_thread_cap() {
    if (const char* env = std::getenv("HYDRA_PEFT_THREADS")) {
        const long v = std::atol(env);
        if (v >= 1) return std::size_t(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : std::size_t(hw);
}

/// Pretrain the base model per config, returning the model and its record.
inline std::pair<MicroTransformer, RunRecord> run_pretrain(const ExperimentConfig& cfg) {
    ModelConfig base_cfg = cfg.model;
    base_cfg.adapter = AdapterSpec::none();
    Rng build_rng(mix_seed(cfg.pretrain.seed, 0xB01D));
    MicroTransformer model = MicroTransformer::build(base_cfg, build_rng);
    model.set_mode(Mode::pretrain);
    TaskSplits source = load_task_splits(cfg, /*target=*/false);
    RunRecord rec = pretrain(model, source, cfg.pretrain);
    return {std::move(model), std::move(rec)};
}

/// One fine-tuning cell: copy the base, install the variant's adapters with a
/// (seed, variant)-derived stream, re-seed the head, train on the target task.
/// Returns the trained model alongside the record; throws on failure.
struct CellOutput {
    MicroTransformer model;
    RunRecord record;
};

inline CellOutput run_cell_model(const MicroTransformer& base,
                                 const ExperimentConfig& cfg, const VariantSpec& variant,
                                 std::uint64_t seed, const TaskSplits& target) {
    MicroTransformer model = base;
    const PlacementSet placement = variant.placement.value_or(cfg.model.placement);
    if (variant.adapter.has_adapter()) {
        Rng install_rng(mix_seed(seed, detail::fnv1a(variant.name)));
        model.install_adapters(variant.adapter, placement, install_rng);
    }
    Rng head_rng(mix_seed(seed, 0x6EAD));
    model.reinit_head(head_rng);
    model.set_mode(Mode::finetune);

    TrainConfig train_cfg = cfg.train;
    train_cfg.seed = seed;
    RunRecord record = finetune(model, target, train_cfg);
    return {std::move(model), std::move(record)};
}

/// Exception-absorbing wrapper used by the bench grid.
inline CellResult run_cell(const MicroTransformer& base, const ExperimentConfig& cfg,
                           const VariantSpec& variant, std::uint64_t seed,
                           const TaskSplits& target) {
    CellResult cell;
    cell.variant = variant.name;
    cell.seed = seed;
    try {
        CellOutput out = run_cell_model(base, cfg, variant, seed, target);
        cell.record = std::move(out.record);
        cell.accuracy = cell.record.final_accuracy();
        cell.adapter_params = cell.record.adapter_params;
        cell.head_params = cell.record.head_params;
        cell.total_params = cell.record.total_params();
        cell.sec_per_epoch = cell.record.mean_epoch_seconds();
        cell.ok = true;
    } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
    }
    return cell;
}

inline std::vector<VariantSummary> summarize_cells(const ExperimentConfig& cfg,
                                                   const std::vector<CellResult>& cells) {
    std::vector<VariantSummary> out;
    for (const auto& variant : cfg.variants) {
        VariantSummary s;
        s.variant = variant.name;
        std::vector<double> accs;
        for (const auto& c : cells) {
            if (c.variant != variant.name) continue;
            ++s.cells;
            if (!c.ok) continue;
            ++s.ok_cells;
            accs.push_back(c.accuracy);
            s.adapter_params = c.adapter_params;
            s.trainable_millions = double(c.adapter_params + c.head_params) / 1e6;
            s.sec_per_epoch += c.sec_per_epoch;
        }
        if (!accs.empty()) {
            double mean = 0.0;
            for (double a : accs) mean += a;
            mean /= double(accs.size());
            double var = 0.0;
            for (double a : accs) var += (a - mean) * (a - mean);
            var /= double(accs.size());
            s.mean_accuracy = mean;
            s.std_accuracy = std::sqrt(var);
            s.sec_per_epoch /= double(accs.size());
        }
        out.push_back(std::move(s));
    }
    return out;
}

/// The full grid. Results are independent of the thread count.
inline BenchResult run_bench(const ExperimentConfig& cfg,
                             std::size_t max_threads = bench_thread_cap()) {
    cfg.validate();
    BenchResult result;
    auto [base, pre_rec] = run_pretrain(cfg);
    result.pretrain_record = std::move(pre_rec);
    result.source_accuracy = result.pretrain_record.final_accuracy();

    const TaskSplits target = load_task_splits(cfg, /*target=*/true);

    std::vector<std::pair<const VariantSpec*, std::uint64_t>> jobs;
    for (const auto& v : cfg.variants)
        for (std::uint64_t s : cfg.seeds) jobs.push_back({&v, s});
    result.cells.resize(jobs.size());

    const std::size_t workers = std::max<std::size_t>(1, std::min(max_threads, jobs.size()));
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) break;
            result.cells[i] = run_cell(base, cfg, *jobs[i].first, jobs[i].second, target);
        }
    };
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    result.summaries = summarize_cells(cfg, result.cells);
    return result;
}

} // namespace hydra
