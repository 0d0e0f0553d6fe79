// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: a JSON file with sections model / task / train /
// pretrain / variants / seeds. Every field has a default, so an empty object
// (or no config at all) describes the full desk-scale experiment. Unknown
// keys are rejected to catch typos.

#pragma once

#include "hydra/model.hpp"
#include "hydra/optim.hpp"
#include "hydra/task.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace hydra {

struct VariantSpec {
    std::string name;
    AdapterSpec adapter;
    std::optional<PlacementSet> placement; // defaults to the model's placement
};

struct TaskConfig {
    SyntheticTaskSpec spec;
    std::size_t train_examples = 2048;
    std::size_t test_examples = 512;
    std::string source = "synthetic"; // "synthetic" | "csv" | "idx"
    std::string train_csv, test_csv;
    std::string train_images, train_labels, test_images, test_labels;
    std::size_t idx_buckets = 16;
};

struct ExperimentConfig {
    ModelConfig model;
    TaskConfig task;
    TrainConfig train;     // fine-tuning recipe
    TrainConfig pretrain;  // pretraining recipe
    std::vector<VariantSpec> variants;
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    std::string output_dir = "hydra_out";
    std::optional<std::vector<int>> label_permutation; // target task permutation

    void validate() const {
        model.validate();
        task.spec.validate();
        train.validate();
        pretrain.validate();
        if (variants.empty()) throw ContractError("config: at least one variant");
        if (seeds.empty()) throw ContractError("config: at least one seed");
        if (task.source == "synthetic") {
            if (task.spec.seq_len + 1 != model.seq_len) {
                throw ContractError("config: model.seq_len must be task.seq_len + 1 "
                                    "([CLS] occupies position 0)");
            }
            if (task.spec.num_classes != model.num_classes) {
                throw ContractError("config: task and model class counts differ");
            }
            if (task.spec.vocab + 1 > model.vocab) {
                throw ContractError("config: model.vocab must exceed task.vocab "
                                    "(one id is reserved for [CLS])");
            }
        }
    }
};

inline std::vector<VariantSpec> default_variants() {
    return {
        {"baseline_head", AdapterSpec::none(), std::nullopt},
        {"lora_r4", AdapterSpec::lora(4), std::nullopt},
        {"seqlora_r4", AdapterSpec::seqlora(4), std::nullopt},
        {"hydra_r2r2", AdapterSpec::hydra(2, 2), std::nullopt},
    };
}

/// The out-of-the-box desk-scale experiment.
inline ExperimentConfig default_experiment_config() {
    ExperimentConfig cfg;
    // model: d=64, 4 heads, 4 blocks, mlp 256, seq 17, vocab 32, mlp_out placement
    cfg.model.adapter = AdapterSpec::none();

    cfg.task.spec.vocab = 24;
    cfg.task.spec.seq_len = 16;
    cfg.task.spec.num_classes = 4;
    cfg.task.spec.motif_len = 4;
    cfg.task.spec.noise_rate = 0.05;
    cfg.task.spec.seed = 1234;
    cfg.task.train_examples = 768;
    cfg.task.test_examples = 512;

    cfg.pretrain.optimizer = OptimizerKind::adamw;
    cfg.pretrain.lr = 1e-3;
    cfg.pretrain.weight_decay = 0.01;
    cfg.pretrain.schedule = Schedule::cosine_warmup;
    cfg.pretrain.warmup = 50;
    cfg.pretrain.epochs = 6;
    cfg.pretrain.batch_size = 16;
    cfg.pretrain.seed = 7;

    cfg.train.optimizer = OptimizerKind::adamw;
    cfg.train.lr = 1e-2;
    cfg.train.weight_decay = 1e-4;
    cfg.train.schedule = Schedule::cosine_warmup;
    cfg.train.warmup = 50;
    cfg.train.epochs = 6;
    cfg.train.batch_size = 16;
    cfg.train.seed = 0;

    cfg.variants = default_variants();
    return cfg;
}

// ----------------------------------------------------------------------------
// JSON parsing
// ----------------------------------------------------------------------------

namespace detail {

inline void check_keys(const nlohmann::json& obj, const char* section,
                       std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) {
        throw ContractError(std::string("config: section '") + section +
                            "' must be an object");
    }
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) {
            throw ContractError(std::string("config: unknown key '") + key + "' in '" +
                                section + "'");
        }
    }
}

template <typename T>
void maybe(const nlohmann::json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adamw") return OptimizerKind::adamw;
    throw ContractError("config: unknown optimizer '" + s + "'");
}

inline Schedule schedule_from_string(const std::string& s) {
    if (s == "constant") return Schedule::constant;
    if (s == "cosine_warmup") return Schedule::cosine_warmup;
    if (s == "linear_warmup_decay") return Schedule::linear_warmup_decay;
    throw ContractError("config: unknown schedule '" + s + "'");
}

inline PlacementSet placement_from_strings(const nlohmann::json& arr) {
    PlacementSet p;
    for (const auto& v : arr) {
        const std::string s = v.get<std::string>();
        if (s == "mlp_out") p.mlp_out = true;
        else if (s == "msa_proj") p.msa_proj = true;
        else if (s == "msa_qkv") p.msa_qkv = true;
        else throw ContractError("config: unknown placement '" + s + "'");
    }
    return p;
}

inline AdapterSpec adapter_from_json(const nlohmann::json& j, const char* section) {
    check_keys(j, section,
               {"parallel_rank", "sequential_rank", "init_sigma", "adapter_dropout",
                "scaling"});
    AdapterSpec a;
    maybe(j, "parallel_rank", a.parallel_rank);
    maybe(j, "sequential_rank", a.sequential_rank);
    maybe(j, "init_sigma", a.init_sigma);
    maybe(j, "adapter_dropout", a.adapter_dropout);
    maybe(j, "scaling", a.scaling);
    return a;
}

inline void train_from_json(const nlohmann::json& j, const char* section,
                            TrainConfig& cfg) {
    check_keys(j, section,
               {"optimizer", "lr", "weight_decay", "momentum", "beta1", "beta2", "eps",
                "schedule", "warmup", "warmup_in_epochs", "epochs", "batch_size", "seed",
                "dropout"});
    if (j.contains("optimizer"))
        cfg.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
    if (j.contains("schedule"))
        cfg.schedule = schedule_from_string(j.at("schedule").get<std::string>());
    maybe(j, "lr", cfg.lr);
    maybe(j, "weight_decay", cfg.weight_decay);
    maybe(j, "momentum", cfg.momentum);
    maybe(j, "beta1", cfg.beta1);
    maybe(j, "beta2", cfg.beta2);
    maybe(j, "eps", cfg.eps);
    maybe(j, "warmup", cfg.warmup);
    maybe(j, "warmup_in_epochs", cfg.warmup_in_epochs);
    maybe(j, "epochs", cfg.epochs);
    maybe(j, "batch_size", cfg.batch_size);
    maybe(j, "seed", cfg.seed);
    maybe(j, "dropout", cfg.dropout);
}

} // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    detail::check_keys(j, "<root>",
                       {"model", "task", "train", "pretrain", "variants", "seeds",
                        "output_dir", "label_permutation"});
    ExperimentConfig cfg = default_experiment_config();

    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::check_keys(m, "model",
                           {"embed_dim", "mlp_hidden", "heads", "blocks", "seq_len",
                            "num_classes", "vocab", "placement", "adapter"});
        detail::maybe(m, "embed_dim", cfg.model.embed_dim);
        detail::maybe(m, "mlp_hidden", cfg.model.mlp_hidden);
        detail::maybe(m, "heads", cfg.model.heads);
        detail::maybe(m, "blocks", cfg.model.blocks);
        detail::maybe(m, "seq_len", cfg.model.seq_len);
        detail::maybe(m, "num_classes", cfg.model.num_classes);
        detail::maybe(m, "vocab", cfg.model.vocab);
        if (m.contains("placement"))
            cfg.model.placement = detail::placement_from_strings(m.at("placement"));
        if (m.contains("adapter"))
            cfg.model.adapter = detail::adapter_from_json(m.at("adapter"), "model.adapter");
    }

    if (j.contains("task")) {
        const auto& t = j.at("task");
        detail::check_keys(t, "task",
                           {"vocab", "seq_len", "num_classes", "motif_len", "noise_rate",
                            "seed", "train_examples", "test_examples", "source",
                            "train_csv", "test_csv", "train_images", "train_labels",
                            "test_images", "test_labels", "idx_buckets"});
        detail::maybe(t, "vocab", cfg.task.spec.vocab);
        detail::maybe(t, "seq_len", cfg.task.spec.seq_len);
        detail::maybe(t, "num_classes", cfg.task.spec.num_classes);
        detail::maybe(t, "motif_len", cfg.task.spec.motif_len);
        detail::maybe(t, "noise_rate", cfg.task.spec.noise_rate);
        detail::maybe(t, "seed", cfg.task.spec.seed);
        detail::maybe(t, "train_examples", cfg.task.train_examples);
        detail::maybe(t, "test_examples", cfg.task.test_examples);
        detail::maybe(t, "source", cfg.task.source);
        detail::maybe(t, "train_csv", cfg.task.train_csv);
        detail::maybe(t, "test_csv", cfg.task.test_csv);
        detail::maybe(t, "train_images", cfg.task.train_images);
        detail::maybe(t, "train_labels", cfg.task.train_labels);
        detail::maybe(t, "test_images", cfg.task.test_images);
        detail::maybe(t, "test_labels", cfg.task.test_labels);
        detail::maybe(t, "idx_buckets", cfg.task.idx_buckets);
    }

    if (j.contains("train")) detail::train_from_json(j.at("train"), "train", cfg.train);
    if (j.contains("pretrain"))
        detail::train_from_json(j.at("pretrain"), "pretrain", cfg.pretrain);

    if (j.contains("variants")) {
        cfg.variants.clear();
        for (const auto& v : j.at("variants")) {
            detail::check_keys(v, "variants[]",
                               {"name", "parallel_rank", "sequential_rank", "init_sigma",
                                "adapter_dropout", "scaling", "placement"});
            VariantSpec var;
            if (!v.contains("name")) throw ContractError("config: variant needs a name");
            var.name = v.at("name").get<std::string>();
            detail::maybe(v, "parallel_rank", var.adapter.parallel_rank);
            detail::maybe(v, "sequential_rank", var.adapter.sequential_rank);
            detail::maybe(v, "init_sigma", var.adapter.init_sigma);
            detail::maybe(v, "adapter_dropout", var.adapter.adapter_dropout);
            detail::maybe(v, "scaling", var.adapter.scaling);
            if (v.contains("placement"))
                var.placement = detail::placement_from_strings(v.at("placement"));
            cfg.variants.push_back(std::move(var));
        }
    }

    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    detail::maybe(j, "output_dir", cfg.output_dir);
    if (j.contains("label_permutation")) {
        cfg.label_permutation = j.at("label_permutation").get<std::vector<int>>();
    }

    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const std::exception& e) {
        throw ContractError("config: parse error in " + path + ": " + e.what());
    }
    return parse_experiment_config(j);
}

/// Build the (train, test) splits the config describes; `target` selects the
/// shifted fine-tune task instead of the source task.
inline TaskSplits load_task_splits(const ExperimentConfig& cfg, bool target) {
    if (cfg.task.source == "synthetic") {
        SyntheticTaskSpec spec =
            target ? shifted_target(cfg.task.spec, cfg.label_permutation) : cfg.task.spec;
        return make_splits(spec, cfg.task.train_examples, cfg.task.test_examples);
    }
    if (cfg.task.source == "csv") {
        return {load_csv_dataset(cfg.task.train_csv), load_csv_dataset(cfg.task.test_csv)};
    }
    if (cfg.task.source == "idx") {
        return {load_idx_dataset(cfg.task.train_images, cfg.task.train_labels,
                                 cfg.task.idx_buckets),
                load_idx_dataset(cfg.task.test_images, cfg.task.test_labels,
                                 cfg.task.idx_buckets)};
    }
    throw ContractError("config: unknown task source '" + cfg.task.source + "'");
}

} // namespace hydra
