// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line harness: pretrain -> finetune variants -> merge -> analyze ->
// report. Exit codes: 0 success, 2 usage/config error, 3 numerical failure.

#include <hydra/hydra.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hydra;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

ExperimentConfig load_config_or_default(const std::string& path) {
    if (path.empty()) return default_experiment_config();
    return load_experiment_config(path);
}

void write_json(const json& j, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("report: cannot open " + path.string());
    out << j.dump(2) << "\n";
    if (!out) throw IoError("report: write failed for " + path.string());
}

json record_to_json(const RunRecord& rec) {
    return json{{"train_loss", rec.train_loss},
                {"eval_accuracy", rec.eval_accuracy},
                {"lr_trace", rec.lr_trace},
                {"epoch_seconds", rec.epoch_seconds},
                {"sec_per_epoch", rec.mean_epoch_seconds()},
                {"wall_seconds", rec.wall_seconds},
                {"adapter_params", rec.adapter_params},
                {"head_params", rec.head_params},
                {"frozen_params", rec.frozen_params},
                {"total_params", rec.total_params()}};
}

/// Accuracy flags accept a fraction; values above 1 are read as percent.
double accuracy_as_fraction(double a) { return a > 1.0 ? a / 100.0 : a; }

std::vector<std::vector<int>> seeded_probe_tokens(const ModelConfig& cfg,
                                                  std::size_t count,
                                                  std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<int>> out(count);
    for (auto& seq : out) {
        seq.resize(cfg.seq_len);
        seq[0] = int(cfg.cls_token());
        for (std::size_t i = 1; i < cfg.seq_len; ++i)
            seq[i] = int(rng.next_below(cfg.vocab));
    }
    return out;
}

int cmd_pretrain(const std::string& config_path, std::int64_t seed_override,
                 std::string out_dir, bool f64) {
    ExperimentConfig cfg = load_config_or_default(config_path);
    if (seed_override >= 0) cfg.pretrain.seed = std::uint64_t(seed_override);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    fs::create_directories(cfg.output_dir);

    auto [model, rec] = run_pretrain(cfg);
    const fs::path ckpt = fs::path(cfg.output_dir) / "base.ckpt";
    save_checkpoint(model, ckpt.string(), f64);

    json report = {{"command", "pretrain"},
                   {"seed", cfg.pretrain.seed},
                   {"source_accuracy", rec.final_accuracy()},
                   {"checkpoint", ckpt.string()},
                   {"run", record_to_json(rec)}};
    write_json(report, fs::path(cfg.output_dir) / "pretrain_report.json");
    std::printf("pretrain: source accuracy %.4f, checkpoint %s\n", rec.final_accuracy(),
                ckpt.string().c_str());
    return kExitOk;
}

int cmd_finetune(const std::string& config_path, const std::string& base_path,
                 const std::string& variant_name, std::int64_t seed_override,
                 std::string out_dir, bool f64, const std::string& warm_start) {
    ExperimentConfig cfg = load_config_or_default(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    const std::uint64_t seed =
        seed_override >= 0 ? std::uint64_t(seed_override) : cfg.train.seed;

    const VariantSpec* variant = nullptr;
    for (const auto& v : cfg.variants)
        if (v.name == variant_name) variant = &v;
    if (variant == nullptr) {
        throw ContractError("finetune: unknown variant '" + variant_name +
                            "' (not in config variants)");
    }

    MicroTransformer base = load_checkpoint(base_path);
    fs::create_directories(cfg.output_dir);
    TaskSplits target = load_task_splits(cfg, /*target=*/true);

    // Warm start must happen after adapter install, so replicate the cell
    // setup here when requested.
    CellOutput cell = [&] {
        if (warm_start.empty()) return run_cell_model(base, cfg, *variant, seed, target);
        MicroTransformer model = base;
        const PlacementSet placement = variant->placement.value_or(cfg.model.placement);
        if (variant->adapter.has_adapter()) {
            Rng install_rng(mix_seed(seed, detail::fnv1a(variant->name)));
            model.install_adapters(variant->adapter, placement, install_rng);
        }
        Rng head_rng(mix_seed(seed, 0x6EAD));
        model.reinit_head(head_rng);
        // copy adapter + head tensors from the warm-start checkpoint by name
        MicroTransformer donor = load_checkpoint(warm_start);
        auto donor_params = donor.parameters();
        for (auto& p : model.parameters()) {
            if (p.role == Role::frozen) continue;
            for (auto& dp : donor_params) {
                if (dp.name == p.name) {
                    if (!dp.matrix->same_shape(*p.matrix)) {
                        throw ContractError("warm start: shape mismatch for " + p.name);
                    }
                    *p.matrix = *dp.matrix;
                }
            }
        }
        model.set_mode(Mode::finetune);
        TrainConfig train_cfg = cfg.train;
        train_cfg.seed = seed;
        RunRecord rec = finetune(model, target, train_cfg);
        return CellOutput{std::move(model), std::move(rec)};
    }();

    const std::string stem = "finetune_" + variant_name + "_seed" + std::to_string(seed);
    const fs::path ckpt = fs::path(cfg.output_dir) / (stem + ".ckpt");
    save_checkpoint(cell.model, ckpt.string(), f64);

    json report = {{"command", "finetune"},
                   {"variant", variant_name},
                   {"seed", seed},
                   {"base_checkpoint", base_path},
                   {"checkpoint", ckpt.string()},
                   {"target_accuracy", cell.record.final_accuracy()},
                   {"run", record_to_json(cell.record)}};
    write_json(report, fs::path(cfg.output_dir) / (stem + ".json"));
    std::printf("finetune %s seed %llu: target accuracy %.4f (%zu adapter + %zu head "
                "trainables)\n",
                variant_name.c_str(), static_cast<unsigned long long>(seed),
                cell.record.final_accuracy(), cell.record.adapter_params,
                cell.record.head_params);
    return kExitOk;
}

int cmd_merge(const std::string& in_path, const std::string& out_path, bool f64) {
    CheckpointInfo info;
    MicroTransformer model = load_checkpoint(in_path, &info);
    if (!info.has_role("adapter")) {
        throw ContractError("merge: checkpoint has no adapter tensors to fold");
    }
    MicroTransformer folded = model.fold_all();

    // Embedded self-test: drive both forms with seeded probes.
    model.set_mode(Mode::inference);
    auto probes = seeded_probe_tokens(model.cfg, 64, 0xF01D);
    Matrix before = model.logits_eval(probes);
    Matrix after = folded.logits_eval(probes);
    const double deviation = max_abs_diff(before, after);

    save_checkpoint(folded, out_path, f64);
    json report = {{"command", "merge"},
                   {"input", in_path},
                   {"output", out_path},
                   {"probe_count", 64},
                   {"max_abs_deviation", deviation}};
    const fs::path report_path = fs::path(out_path).string() + ".merge_report.json";
    write_json(report, report_path);
    std::printf("merge: folded %s -> %s, max |deviation| over 64 probes = %.3e\n",
                in_path.c_str(), out_path.c_str(), deviation);
    return kExitOk;
}

int cmd_eval(const std::string& config_path, const std::string& ckpt_path,
             const std::string& split, const std::string& which_task,
             std::string out_dir) {
    ExperimentConfig cfg = load_config_or_default(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    if (split != "train" && split != "test") {
        throw ContractError("eval: --split must be train or test");
    }
    if (which_task != "source" && which_task != "target") {
        throw ContractError("eval: --task must be source or target");
    }
    MicroTransformer model = load_checkpoint(ckpt_path);
    TaskSplits splits = load_task_splits(cfg, which_task == "target");
    const Dataset& data = split == "train" ? splits.train : splits.test;
    const double acc = evaluate(model, data);

    fs::create_directories(cfg.output_dir);
    json report = {{"command", "eval"},
                   {"checkpoint", ckpt_path},
                   {"task", which_task},
                   {"split", split},
                   {"examples", data.size()},
                   {"accuracy", acc}};
    write_json(report, fs::path(cfg.output_dir) / "eval_report.json");
    std::printf("eval: accuracy %.4f on %s/%s (%zu examples)\n", acc, which_task.c_str(),
                split.c_str(), data.size());
    return kExitOk;
}

int cmd_analyze(const std::string& config_path, const std::string& ckpt_path,
                const std::string& base_path, const std::string& mode,
                double accuracy_flag, std::string out_dir, std::size_t probes,
                double i_frac, std::size_t j_max) {
    ExperimentConfig cfg = load_config_or_default(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    fs::create_directories(cfg.output_dir);

    MicroTransformer model = load_checkpoint(ckpt_path);
    MicroTransformer base = load_checkpoint(base_path);

    // Consistency: every frozen tensor must match the base checkpoint.
    {
        auto base_params = base.parameters();
        for (auto& p : model.parameters()) {
            if (p.role != Role::frozen) continue;
            const Matrix* base_m = nullptr;
            for (auto& bp : base_params)
                if (bp.name == p.name) base_m = bp.matrix;
            if (base_m == nullptr || !base_m->same_shape(*p.matrix)) {
                throw ContractError("analyze: checkpoint shapes inconsistent for " +
                                    p.name);
            }
            if (!(*base_m == *p.matrix)) {
                throw ContractError("analyze: frozen tensor " + p.name +
                                    " differs from the base checkpoint");
            }
        }
    }

    if (mode == "similarity") {
        auto layers = model.adapted_layers();
        if (layers.empty()) throw ContractError("analyze: no adapted layers");
        json summary = json::array();
        for (std::size_t li = 0; li < layers.size(); ++li) {
            for (BranchKind kind : {BranchKind::parallel, BranchKind::sequential}) {
                const char* tag = kind == BranchKind::parallel ? "parallel" : "sequential";
                json entry = {{"layer", li}, {"branch", tag}};
                try {
                    SimilarityGrid grid =
                        similarity_grid(model, li, kind, i_frac, j_max);
                    const fs::path csv = fs::path(cfg.output_dir) /
                                         ("similarity_layer" + std::to_string(li) + "_" +
                                          tag + ".csv");
                    write_similarity_csv(grid, csv.string());
                    entry["csv"] = csv.string();
                    entry["i_max"] = grid.i_max;
                    entry["j_max"] = grid.j_max;
                } catch (const DegenerateAdapterError&) {
                    entry["degenerate"] = true;
                } catch (const ContractError& e) {
                    entry["skipped"] = e.what();
                }
                summary.push_back(std::move(entry));
            }
        }
        write_json({{"command", "analyze"}, {"mode", "similarity"}, {"grids", summary}},
                   fs::path(cfg.output_dir) / "similarity_report.json");
        std::printf("analyze: wrote similarity grids for %zu adapted layers to %s\n",
                    layers.size(), cfg.output_dir.c_str());
        return kExitOk;
    }

    if (mode == "features") {
        TaskSplits splits = load_task_splits(cfg, /*target=*/true);
        const std::size_t n = std::min(probes, splits.test.size());
        if (n == 0) throw ContractError("analyze: no probe examples available");
        std::vector<std::vector<int>> batch(splits.test.tokens.begin(),
                                            splits.test.tokens.begin() + long(n));
        const fs::path csv = fs::path(cfg.output_dir) / "features.csv";
        export_branch_features(model, with_cls(batch, model.cfg.cls_token()),
                               csv.string());
        write_json({{"command", "analyze"},
                    {"mode", "features"},
                    {"examples", n},
                    {"rows", 3 * n},
                    {"csv", csv.string()}},
                   fs::path(cfg.output_dir) / "features_report.json");
        std::printf("analyze: wrote %zu feature rows to %s\n", 3 * n,
                    csv.string().c_str());
        return kExitOk;
    }

    if (mode == "params") {
        ParamReport rep = param_report(model);
        json report = {{"command", "analyze"},
                       {"mode", "params"},
                       {"adapter_params", rep.adapter_params},
                       {"head_params", rep.head_params},
                       {"frozen_params", rep.frozen_params},
                       {"total", rep.total},
                       {"trainable_millions", rep.trainable_millions}};
        std::printf("params: adapter=%zu head=%zu frozen=%zu total=%zu (%.6f M "
                    "trainable)\n",
                    rep.adapter_params, rep.head_params, rep.frozen_params, rep.total,
                    rep.trainable_millions);
        if (accuracy_flag >= 0.0) {
            const double acc = accuracy_as_fraction(accuracy_flag);
            const double pe = pe_score(
                {acc, double(rep.adapter_params + rep.head_params), 1e8});
            report["accuracy"] = acc;
            report["pe_score"] = pe;
            std::printf("PE %.3f (accuracy %.4f, p = %zu, M0 = 1e8)\n", pe, acc,
                        rep.adapter_params + rep.head_params);
        }
        write_json(report, fs::path(cfg.output_dir) / "params_report.json");
        return kExitOk;
    }

    throw ContractError("analyze: unknown mode '" + mode +
                        "' (expected similarity, features or params)");
}

int cmd_bench(const std::string& config_path, std::string out_dir) {
    ExperimentConfig cfg = load_config_or_default(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    fs::create_directories(cfg.output_dir);

    BenchResult res = run_bench(cfg);

    char line[256];
    std::string table;
    std::snprintf(line, sizeof line, "%-16s %10s %12s %10s %10s\n", "variant",
                  "params(M)", "acc", "std", "sec/epoch");
    table += line;
    for (const auto& s : res.summaries) {
        std::snprintf(line, sizeof line, "%-16s %10.6f %12.4f %10.4f %10.2f\n",
                      s.variant.c_str(), s.trainable_millions, s.mean_accuracy,
                      s.std_accuracy, s.sec_per_epoch);
        table += line;
        if (s.ok_cells < s.cells) {
            std::snprintf(line, sizeof line, "%-16s %zu/%zu cells failed\n", "",
                          s.cells - s.ok_cells, s.cells);
            table += line;
        }
    }
    std::printf("source accuracy %.4f\n%s", res.source_accuracy, table.c_str());
    {
        std::ofstream out(fs::path(cfg.output_dir) / "bench_table.txt");
        out << "source accuracy " << res.source_accuracy << "\n" << table;
    }

    json cells = json::array();
    std::size_t ok = 0;
    for (const auto& c : res.cells) {
        ok += std::size_t(c.ok);
        cells.push_back({{"variant", c.variant},
                         {"seed", c.seed},
                         {"ok", c.ok},
                         {"error", c.error},
                         {"accuracy", c.accuracy},
                         {"adapter_params", c.adapter_params},
                         {"head_params", c.head_params},
                         {"total_params", c.total_params},
                         {"sec_per_epoch", c.sec_per_epoch}});
    }
    json summaries = json::array();
    for (const auto& s : res.summaries) {
        summaries.push_back({{"variant", s.variant},
                             {"adapter_params", s.adapter_params},
                             {"trainable_millions", s.trainable_millions},
                             {"mean_accuracy", s.mean_accuracy},
                             {"std_accuracy", s.std_accuracy},
                             {"sec_per_epoch", s.sec_per_epoch},
                             {"ok_cells", s.ok_cells},
                             {"cells", s.cells}});
    }
    write_json({{"command", "bench"},
                {"source_accuracy", res.source_accuracy},
                {"pretrain", record_to_json(res.pretrain_record)},
                {"cells", cells},
                {"summaries", summaries}},
               fs::path(cfg.output_dir) / "bench_results.json");

    return ok == 0 ? kExitNumerical : kExitOk;
}

int cmd_score(double accuracy, double params, double m0) {
    const double pe = pe_score({accuracy_as_fraction(accuracy), params, m0});
    std::printf("PE %.3f\n", pe);
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    tune_allocator_for_training();

    CLI::App app{"hydra-peft: parameter-efficient fine-tuning with parallel + "
                 "sequential low-rank branches on a micro transformer"};
    app.require_subcommand(1);

    std::string config_path, out_dir, base_path, ckpt_path, variant, in_path, out_path;
    std::string split = "test", which_task = "target", mode, warm_start;
    std::int64_t seed = -1;
    bool f64 = false;
    double accuracy_flag = -1.0, params_flag = 0.0, m0 = 1e8;
    std::size_t probes = 128, j_max = 2;
    double i_frac = 0.10;

    auto* pre = app.add_subcommand("pretrain", "train a base model on the source task");
    pre->add_option("--config", config_path, "experiment config JSON");
    pre->add_option("--seed", seed, "override pretrain seed");
    pre->add_option("--out", out_dir, "output directory");
    pre->add_flag("--f64", f64, "store checkpoint payload as 64-bit reals");

    auto* fin = app.add_subcommand("finetune", "fine-tune one adapter variant");
    fin->add_option("--config", config_path, "experiment config JSON");
    fin->add_option("--base", base_path, "base checkpoint")->required();
    fin->add_option("--variant", variant, "variant name from the config")->required();
    fin->add_option("--seed", seed, "override train seed");
    fin->add_option("--out", out_dir, "output directory");
    fin->add_option("--warm-start", warm_start,
                    "checkpoint supplying initial adapter/head tensors");
    fin->add_flag("--f64", f64, "store checkpoint payload as 64-bit reals");

    auto* mrg = app.add_subcommand("merge", "fold adapters into the base weights");
    mrg->add_option("--in", in_path, "adapted checkpoint")->required();
    mrg->add_option("--out", out_path, "merged checkpoint")->required();
    mrg->add_flag("--f64", f64, "store checkpoint payload as 64-bit reals");

    auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on a task split");
    evl->add_option("--config", config_path, "experiment config JSON");
    evl->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    evl->add_option("--split", split, "train|test (default test)");
    evl->add_option("--task", which_task, "source|target (default target)");
    evl->add_option("--out", out_dir, "output directory");

    auto* ana = app.add_subcommand("analyze",
                                   "similarity grids, branch features or param counts");
    ana->add_option("--config", config_path, "experiment config JSON");
    ana->add_option("--ckpt", ckpt_path, "adapted checkpoint")->required();
    ana->add_option("--base", base_path, "base checkpoint")->required();
    ana->add_option("--mode", mode, "similarity|features|params")->required();
    ana->add_option("--accuracy", accuracy_flag,
                    "accuracy for the PE score (fraction, or percent if > 1)");
    ana->add_option("--probes", probes, "probe batch size for features mode");
    ana->add_option("--i-frac", i_frac, "fraction of W0 singular directions");
    ana->add_option("--j-max", j_max, "adapter singular directions");
    ana->add_option("--out", out_dir, "output directory");

    auto* ben = app.add_subcommand("bench", "run the full variant x seed grid");
    ben->add_option("--config", config_path, "experiment config JSON");
    ben->add_option("--out", out_dir, "output directory");

    auto* sco = app.add_subcommand("score", "compute the PE score");
    sco->add_option("--accuracy", accuracy_flag, "accuracy (fraction, or percent if > 1)")
        ->required();
    sco->add_option("--params", params_flag, "trainable parameter count")->required();
    sco->add_option("--m0", m0, "pre-trained parameter magnitude (default 1e8)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (pre->parsed()) return cmd_pretrain(config_path, seed, out_dir, f64);
        if (fin->parsed())
            return cmd_finetune(config_path, base_path, variant, seed, out_dir, f64,
                                warm_start);
        if (mrg->parsed()) return cmd_merge(in_path, out_path, f64);
        if (evl->parsed())
            return cmd_eval(config_path, ckpt_path, split, which_task, out_dir);
        if (ana->parsed())
            return cmd_analyze(config_path, ckpt_path, base_path, mode, accuracy_flag,
                               out_dir, probes, i_frac, j_max);
        if (ben->parsed()) return cmd_bench(config_path, out_dir);
        if (sco->parsed()) return cmd_score(accuracy_flag, params_flag, m0);
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return kExitNumerical;
    }
    return kExitUsage;
}
