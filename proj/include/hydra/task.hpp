// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic sequence-classification tasks: every example hides one
// class-identifying motif at a random position inside background tokens, plus
// optional token corruption. The token range is split into quarters —
// [0, V/4) source motif alphabet, [V/4, V/2) target motif alphabet,
// [V/2, V) background — so the fine-tuning target (label permutation plus the
// disjoint target alphabet) is a genuine domain shift from the source task.
//
// Also ingests IDX image files (byte-bucket quantized to token ids) and
// labeled CSV for real-data smoke tests.

#pragma once

#include "hydra/matrix.hpp"
#include "hydra/rng.hpp"

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace hydra {

struct SyntheticTaskSpec {
    std::size_t vocab = 24;
    std::size_t seq_len = 16;
    std::size_t num_classes = 4;
    std::size_t motif_len = 4;
    double noise_rate = 0.05;
    std::uint64_t seed = 1234;
    // Present => the shifted fine-tune target: motifs come from the target
    // alphabet and labels are permuted. Absent => the source (pretrain) task.
    std::optional<std::vector<int>> label_permutation;

    std::size_t alphabet_size() const { return vocab / 4; }

    void validate() const {
        if (vocab < 4) throw ContractError("task: vocab must be >= 4");
        if (seq_len < 1) throw ContractError("task: seq_len must be >= 1");
        if (motif_len == 0 || motif_len > seq_len) {
            throw ContractError("task: motif_len must be in [1, seq_len]");
        }
        if (num_classes < 2) throw ContractError("task: need >= 2 classes");
        if (noise_rate < 0.0 || noise_rate > 1.0) {
            throw ContractError("task: noise_rate must be in [0, 1]");
        }
        double combos = 1.0;
        for (std::size_t i = 0; i < motif_len; ++i) combos *= double(alphabet_size());
        if (combos < double(num_classes)) {
            throw ContractError("task: fewer motif combinations than classes");
        }
        if (label_permutation) {
            if (label_permutation->size() != num_classes) {
                throw ContractError("task: label_permutation size != num_classes");
            }
            std::vector<char> seen(num_classes, 0);
            for (int v : *label_permutation) {
                if (v < 0 || std::size_t(v) >= num_classes || seen[std::size_t(v)]) {
                    throw ContractError("task: label_permutation is not a permutation");
                }
                seen[std::size_t(v)] = 1;
            }
        }
    }
};

struct Dataset {
    std::vector<std::vector<int>> tokens;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
};

enum class Split { train, test };

/// The per-class motif table for a spec (ground truth; also used by the
/// test-side oracle classifier). Motifs are distinct and pairwise separated
/// by at least ceil(motif_len/2) Hamming distance when the alphabet allows.
inline std::vector<std::vector<int>> task_motifs(const SyntheticTaskSpec& spec) {
    spec.validate();
    const std::size_t alpha = spec.alphabet_size();
    const std::size_t lo = spec.label_permutation ? alpha : 0; // target vs source range
    Rng rng(mix_seed(spec.seed, 0x4D4F544946ULL)); // "MOTIF"
    const std::size_t min_dist = (spec.motif_len + 1) / 2;

    std::vector<std::vector<int>> motifs;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        std::vector<int> m(spec.motif_len);
        for (int attempt = 0;; ++attempt) {
            for (auto& t : m) t = int(lo + rng.next_below(alpha));
            bool ok = true;
            for (const auto& prev : motifs) {
                std::size_t dist = 0;
                for (std::size_t i = 0; i < spec.motif_len; ++i)
                    dist += std::size_t(prev[i] != m[i]);
                // after many attempts fall back to plain distinctness
                const std::size_t need = attempt < 1000 ? min_dist : 1;
                if (dist < need) {
                    ok = false;
                    break;
                }
            }
            if (ok) break;
        }
        motifs.push_back(m);
    }
    return motifs;
}

/// Deterministic per (spec.seed, split, index). Classes are balanced by
/// index; per example a motif position, background fill and noise corruption
/// are drawn from that example's own substream.
inline Dataset generate_task(const SyntheticTaskSpec& spec, Split split, std::size_t n) {
    spec.validate();
    const auto motifs = task_motifs(spec);
    const std::size_t bg_lo = spec.vocab / 2;
    const std::size_t bg_size = spec.vocab - bg_lo;
    const std::uint64_t split_tag = split == Split::train ? 1 : 2;

    Dataset out;
    out.tokens.reserve(n);
    out.labels.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(mix_seed(spec.seed, split_tag, i));
        const std::size_t motif_idx = i % spec.num_classes;
        const int label = spec.label_permutation
                              ? (*spec.label_permutation)[motif_idx]
                              : int(motif_idx);
        std::vector<int> seq(spec.seq_len);
        const std::size_t pos = rng.next_below(spec.seq_len - spec.motif_len + 1);
        for (auto& t : seq) t = int(bg_lo + rng.next_below(bg_size));
        for (std::size_t j = 0; j < spec.motif_len; ++j) seq[pos + j] = motifs[motif_idx][j];
        if (spec.noise_rate > 0.0) {
            for (auto& t : seq) {
                if (rng.next_uniform() < spec.noise_rate) t = int(rng.next_below(spec.vocab));
            }
        }
        out.tokens.push_back(std::move(seq));
        out.labels.push_back(label);
    }
    return out;
}

struct TaskSplits {
    Dataset train;
    Dataset test;
};

inline TaskSplits make_splits(const SyntheticTaskSpec& spec, std::size_t n_train,
                              std::size_t n_test) {
    return {generate_task(spec, Split::train, n_train),
            generate_task(spec, Split::test, n_test)};
}

/// The shifted fine-tune counterpart of a source task: disjoint motif
/// alphabet plus a label permutation (default: rotate labels by one).
inline SyntheticTaskSpec shifted_target(const SyntheticTaskSpec& source,
                                        std::optional<std::vector<int>> permutation =
                                            std::nullopt) {
    SyntheticTaskSpec target = source;
    if (!permutation) {
        std::vector<int> rot(source.num_classes);
        for (std::size_t c = 0; c < source.num_classes; ++c)
            rot[c] = int((c + 1) % source.num_classes);
        permutation = std::move(rot);
    }
    target.label_permutation = std::move(permutation);
    return target;
}

/// Prepend the model's [CLS] id to every sequence.
inline std::vector<std::vector<int>> with_cls(const std::vector<std::vector<int>>& tokens,
                                              std::size_t cls_id) {
    std::vector<std::vector<int>> out;
    out.reserve(tokens.size());
    for (const auto& seq : tokens) {
        std::vector<int> row;
        row.reserve(seq.size() + 1);
        row.push_back(int(cls_id));
        row.insert(row.end(), seq.begin(), seq.end());
        out.push_back(std::move(row));
    }
    return out;
}

// ----------------------------------------------------------------------------
// File ingestion
// ----------------------------------------------------------------------------

namespace detail {
inline std::uint32_t read_be_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError("idx: truncated header in " + path);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}
} // namespace detail

/// IDX image file (magic 0x00000803), each image flattened row-major and
/// byte-bucket quantized: token = byte * num_buckets / 256.
inline std::vector<std::vector<int>> read_idx_images(const std::string& path,
                                                     std::size_t num_buckets) {
    if (num_buckets == 0 || num_buckets > 256) {
        throw ContractError("idx: num_buckets must be in [1, 256]");
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("idx: cannot open " + path);
    if (detail::read_be_u32(in, path) != 0x00000803u) {
        throw IoError("idx: bad image magic in " + path);
    }
    const std::size_t count = detail::read_be_u32(in, path);
    const std::size_t rows = detail::read_be_u32(in, path);
    const std::size_t cols = detail::read_be_u32(in, path);
    std::vector<std::vector<int>> out(count);
    std::vector<unsigned char> buf(rows * cols);
    for (auto& img : out) {
        in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
        if (!in) throw IoError("idx: truncated image data in " + path);
        img.resize(buf.size());
        for (std::size_t i = 0; i < buf.size(); ++i)
            img[i] = int(std::size_t(buf[i]) * num_buckets / 256);
    }
    return out;
}

/// IDX label file (magic 0x00000801).
inline std::vector<int> read_idx_labels(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("idx: cannot open " + path);
    if (detail::read_be_u32(in, path) != 0x00000801u) {
        throw IoError("idx: bad label magic in " + path);
    }
    const std::size_t count = detail::read_be_u32(in, path);
    std::vector<int> out(count);
    for (auto& v : out) {
        unsigned char b;
        in.read(reinterpret_cast<char*>(&b), 1);
        if (!in) throw IoError("idx: truncated label data in " + path);
        v = int(b);
    }
    return out;
}

inline Dataset load_idx_dataset(const std::string& images_path,
                                const std::string& labels_path,
                                std::size_t num_buckets) {
    Dataset ds;
    ds.tokens = read_idx_images(images_path, num_buckets);
    ds.labels = read_idx_labels(labels_path);
    if (ds.tokens.size() != ds.labels.size()) {
        throw IoError("idx: image/label count mismatch (" +
                      std::to_string(ds.tokens.size()) + " vs " +
                      std::to_string(ds.labels.size()) + ")");
    }
    return ds;
}

/// CSV with header `label,tok_0..tok_{L-1}` and integer rows.
inline Dataset load_csv_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError("csv: empty file " + path);
    if (line.rfind("label", 0) != 0) {
        throw IoError("csv: header must start with 'label' in " + path);
    }
    std::size_t expected_cols = 1;
    for (char c : line) expected_cols += std::size_t(c == ',');

    Dataset ds;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<int> values;
        while (std::getline(ss, cell, ',')) {
            try {
                values.push_back(std::stoi(cell));
            } catch (const std::exception&) {
                throw IoError("csv: non-integer cell at line " + std::to_string(line_no) +
                              " in " + path);
            }
        }
        if (values.size() != expected_cols) {
            throw IoError("csv: expected " + std::to_string(expected_cols) +
                          " columns at line " + std::to_string(line_no) + " in " + path);
        }
        ds.labels.push_back(values[0]);
        ds.tokens.emplace_back(values.begin() + 1, values.end());
    }
    return ds;
}

} // namespace hydra
