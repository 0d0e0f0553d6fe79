// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container:
//
//   "HYDR" | u32 format_version | u32 header_size | header JSON | payload | u32 CRC32
//
// The header is a JSON manifest carrying the model configuration and, per
// tensor, {name, rows, cols, dtype, offset, role}. Roles partition the tensor
// set into frozen / adapter / head. The payload is raw little-endian reals
// (f32 by default, f64 on request); the trailing CRC32 (IEEE) covers the
// payload and corrupted files are rejected on load.

#pragma once

#include "hydra/model.hpp"

#include <json.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace hydra {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'H', 'Y', 'D', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint32_t crc32_ieee(const unsigned char* data, std::size_t len) {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

struct TensorInfo {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::string dtype;
    std::size_t offset = 0;
    std::string role;
};

struct CheckpointInfo {
    std::uint32_t version = 0;
    nlohmann::json manifest;
    std::vector<TensorInfo> tensors;

    bool has_role(const std::string& role) const {
        for (const auto& t : tensors)
            if (t.role == role) return true;
        return false;
    }
};

namespace detail {

inline nlohmann::json placement_to_json(const PlacementSet& p) {
    nlohmann::json arr = nlohmann::json::array();
    if (p.mlp_out) arr.push_back("mlp_out");
    if (p.msa_proj) arr.push_back("msa_proj");
    if (p.msa_qkv) arr.push_back("msa_qkv");
    return arr;
}

inline PlacementSet placement_from_json(const nlohmann::json& arr) {
    PlacementSet p;
    for (const auto& v : arr) {
        const std::string s = v.get<std::string>();
        if (s == "mlp_out") p.mlp_out = true;
        else if (s == "msa_proj") p.msa_proj = true;
        else if (s == "msa_qkv") p.msa_qkv = true;
        else throw IoError("checkpoint: unknown placement '" + s + "'");
    }
    return p;
}

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{
        {"embed_dim", cfg.embed_dim},
        {"mlp_hidden", cfg.mlp_hidden},
        {"heads", cfg.heads},
        {"blocks", cfg.blocks},
        {"seq_len", cfg.seq_len},
        {"num_classes", cfg.num_classes},
        {"vocab", cfg.vocab},
        {"placement", placement_to_json(cfg.placement)},
        {"adapter",
         {{"parallel_rank", cfg.adapter.parallel_rank},
          {"sequential_rank", cfg.adapter.sequential_rank},
          {"init_sigma", cfg.adapter.init_sigma},
          {"adapter_dropout", cfg.adapter.adapter_dropout},
          {"scaling", cfg.adapter.scaling}}},
    };
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
    cfg.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
    cfg.heads = j.at("heads").get<std::size_t>();
    cfg.blocks = j.at("blocks").get<std::size_t>();
    cfg.seq_len = j.at("seq_len").get<std::size_t>();
    cfg.num_classes = j.at("num_classes").get<std::size_t>();
    cfg.vocab = j.at("vocab").get<std::size_t>();
    cfg.placement = placement_from_json(j.at("placement"));
    const auto& a = j.at("adapter");
    cfg.adapter.parallel_rank = a.at("parallel_rank").get<std::size_t>();
    cfg.adapter.sequential_rank = a.at("sequential_rank").get<std::size_t>();
    cfg.adapter.init_sigma = a.at("init_sigma").get<double>();
    cfg.adapter.adapter_dropout = a.at("adapter_dropout").get<double>();
    cfg.adapter.scaling = a.at("scaling").get<double>();
    return cfg;
}

inline void append_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

} // namespace detail

/// Serialize the model. dtype is f32 unless f64 is requested.
inline void save_checkpoint(MicroTransformer& model, const std::string& path,
                            bool f64 = false) {
    const std::string dtype = f64 ? "f64" : "f32";
    const std::size_t elem = f64 ? 8 : 4;

    nlohmann::json tensors = nlohmann::json::array();
    std::string payload;
    std::size_t offset = 0;
    for (const auto& p : model.parameters()) {
        tensors.push_back({{"name", p.name},
                           {"rows", p.matrix->rows()},
                           {"cols", p.matrix->cols()},
                           {"dtype", dtype},
                           {"offset", offset},
                           {"role", role_name(p.role)}});
        for (double v : p.matrix->data()) {
            if (f64) {
                char b[8];
                std::memcpy(b, &v, 8);
                payload.append(b, 8);
            } else {
                const float f = static_cast<float>(v);
                char b[4];
                std::memcpy(b, &f, 4);
                payload.append(b, 4);
            }
        }
        offset += p.matrix->size() * elem;
    }

    nlohmann::json manifest{{"model", detail::model_config_to_json(model.cfg)},
                            {"tensors", tensors}};
    const std::string header = manifest.dump();

    std::string blob;
    blob.append(kCheckpointMagic, 4);
    detail::append_u32(blob, kCheckpointVersion);
    detail::append_u32(blob, static_cast<std::uint32_t>(header.size()));
    blob += header;
    blob += payload;
    detail::append_u32(blob,
                       crc32_ieee(reinterpret_cast<const unsigned char*>(payload.data()),
                                  payload.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
    out.write(blob.data(), std::streamsize(blob.size()));
    if (!out) throw IoError("checkpoint: write failed for " + path);
}

/// Rebuild a model from a checkpoint. Validates magic, version, tensor shapes
/// and the payload CRC; any mismatch is an IoError. The loaded model is left
/// in inference mode.
inline MicroTransformer load_checkpoint(const std::string& path,
                                        CheckpointInfo* info_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open " + path);
    std::string blob((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    if (blob.size() < 12 || std::memcmp(blob.data(), kCheckpointMagic, 4) != 0) {
        throw IoError("checkpoint: bad magic in " + path);
    }
    std::uint32_t version = 0, header_size = 0;
    std::memcpy(&version, blob.data() + 4, 4);
    std::memcpy(&header_size, blob.data() + 8, 4);
    if (version != kCheckpointVersion) {
        throw IoError("checkpoint: unsupported format version " + std::to_string(version));
    }
    if (blob.size() < 12 + std::size_t(header_size) + 4) {
        throw IoError("checkpoint: truncated file " + path);
    }
    const std::string header = blob.substr(12, header_size);
    const std::size_t payload_begin = 12 + header_size;
    const std::size_t payload_size = blob.size() - payload_begin - 4;
    std::uint32_t stored_crc = 0;
    std::memcpy(&stored_crc, blob.data() + blob.size() - 4, 4);
    const std::uint32_t actual_crc = crc32_ieee(
        reinterpret_cast<const unsigned char*>(blob.data() + payload_begin), payload_size);
    if (stored_crc != actual_crc) {
        throw IoError("checkpoint: payload CRC mismatch in " + path +
                      " (file is corrupted)");
    }

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(header);
    } catch (const std::exception& e) {
        throw IoError("checkpoint: bad manifest in " + path + ": " + e.what());
    }

    ModelConfig cfg = detail::model_config_from_json(manifest.at("model"));
    Rng scratch(0); // every tensor is overwritten below
    MicroTransformer model = MicroTransformer::build(cfg, scratch);

    CheckpointInfo info;
    info.version = version;
    info.manifest = manifest;

    auto params = model.parameters();
    std::size_t matched = 0;
    for (const auto& jt : manifest.at("tensors")) {
        TensorInfo t;
        t.name = jt.at("name").get<std::string>();
        t.rows = jt.at("rows").get<std::size_t>();
        t.cols = jt.at("cols").get<std::size_t>();
        t.dtype = jt.at("dtype").get<std::string>();
        t.offset = jt.at("offset").get<std::size_t>();
        t.role = jt.at("role").get<std::string>();
        info.tensors.push_back(t);

        Matrix* target = nullptr;
        for (auto& p : params) {
            if (p.name == t.name) {
                target = p.matrix;
                break;
            }
        }
        if (target == nullptr) {
            throw IoError("checkpoint: tensor '" + t.name + "' has no parameter slot");
        }
        if (target->rows() != t.rows || target->cols() != t.cols) {
            throw IoError("checkpoint: shape mismatch for '" + t.name + "'");
        }
        const std::size_t elem = t.dtype == "f64" ? 8 : 4;
        if (t.dtype != "f32" && t.dtype != "f64") {
            throw IoError("checkpoint: unknown dtype '" + t.dtype + "'");
        }
        const std::size_t need = t.offset + target->size() * elem;
        if (need > payload_size) throw IoError("checkpoint: payload too small for '" +
                                               t.name + "'");
        const char* src = blob.data() + payload_begin + t.offset;
        for (std::size_t i = 0; i < target->size(); ++i) {
            if (elem == 8) {
                double v;
                std::memcpy(&v, src + i * 8, 8);
                target->data()[i] = v;
            } else {
                float v;
                std::memcpy(&v, src + i * 4, 4);
                target->data()[i] = double(v);
            }
        }
        ++matched;
    }
    if (matched != params.size()) {
        throw IoError("checkpoint: manifest lists " + std::to_string(matched) +
                      " tensors but the model has " + std::to_string(params.size()));
    }

    model.set_mode(Mode::inference);
    if (info_out != nullptr) *info_out = std::move(info);
    return model;
}

/// Header-only inspection (still validates magic/version/CRC).
inline CheckpointInfo read_checkpoint_info(const std::string& path) {
    CheckpointInfo info;
    load_checkpoint(path, &info);
    return info;
}

} // namespace hydra
