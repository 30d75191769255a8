#pragma once

// Checkpoint container: one line of JSON manifest, then a little-endian f32
// payload. Manifest entries carry name, dtype, shape and byte offsets.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "epban/image.hpp"
#include "epban/pban.hpp"

namespace epban {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

struct CheckpointFile {
    nlohmann::json manifest;
    std::vector<CheckpointEntry> entries;
};

namespace detail {

inline void put_f32_le(std::vector<std::uint8_t>& out, float v) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

inline float get_f32_le(const std::uint8_t* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(bits);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const std::string& kind, nlohmann::json meta,
                                                   const std::vector<CheckpointEntry>& entries) {
    nlohmann::json list = nlohmann::json::array();
    std::vector<std::uint8_t> payload;
    for (const auto& e : entries) {
        if (numel_of(e.shape) != e.values.size()) throw CheckpointError("entry " + e.name + ": shape/value mismatch");
        list.push_back({{"name", e.name},
                        {"dtype", "f32"},
                        {"shape", e.shape},
                        {"offset", payload.size()},
                        {"nbytes", e.values.size() * 4}});
        for (float v : e.values) detail::put_f32_le(payload, v);
    }
    meta["format"] = "epban-checkpoint";
    meta["format_version"] = kCheckpointVersion;
    meta["kind"] = kind;
    meta["payload_bytes"] = payload.size();
    meta["entries"] = std::move(list);
    const std::string head = meta.dump() + "\n";
    std::vector<std::uint8_t> out(head.begin(), head.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

inline CheckpointFile decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& kind) {
    const auto nl = std::find(bytes.begin(), bytes.end(), std::uint8_t{'\n'});
    if (nl == bytes.end()) throw CheckpointError("checkpoint: missing manifest terminator");
    CheckpointFile file;
    try {
        file.manifest = nlohmann::json::parse(bytes.begin(), nl);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
    const auto& m = file.manifest;
    try {
        if (m.value("format", "") != "epban-checkpoint") throw CheckpointError("checkpoint: unrecognized format tag");
        const int version = m.at("format_version").get<int>();
        if (version != kCheckpointVersion)
            throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
        if (m.at("kind").get<std::string>() != kind)
            throw CheckpointError("checkpoint: kind '" + m.at("kind").get<std::string>() + "', expected '" + kind + "'");
        const std::size_t start = static_cast<std::size_t>(nl - bytes.begin()) + 1;
        const std::size_t declared = m.at("payload_bytes").get<std::size_t>();
        const std::size_t actual = bytes.size() - start;
        if (declared != actual)
            throw CheckpointError("checkpoint: payload length mismatch, manifest declares " + std::to_string(declared) +
                                  " bytes, file holds " + std::to_string(actual));
        for (const auto& e : m.at("entries")) {
            CheckpointEntry ce;
            ce.name = e.at("name").get<std::string>();
            if (e.at("dtype").get<std::string>() != "f32")
                throw CheckpointError("checkpoint: entry " + ce.name + " has unsupported dtype");
            ce.shape = e.at("shape").get<Shape>();
            const auto off = e.at("offset").get<std::size_t>();
            const auto nbytes = e.at("nbytes").get<std::size_t>();
            if (nbytes != numel_of(ce.shape) * 4 || off > declared || nbytes > declared - off)
                throw CheckpointError("checkpoint: entry " + ce.name + " length mismatch with payload");
            ce.values.resize(numel_of(ce.shape));
            for (std::size_t i = 0; i < ce.values.size(); ++i)
                ce.values[i] = detail::get_f32_le(bytes.data() + start + off + 4 * i);
            file.entries.push_back(std::move(ce));
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
    return file;
}

inline CheckpointFile read_checkpoint(const std::string& path, const std::string& kind) {
    try {
        return decode_checkpoint(read_file_bytes(path), kind);
    } catch (const CheckpointError& e) {
        throw CheckpointError(path + ": " + e.what());
    }
}

// Fills named tensors from entries; every name must match exactly once.
template <class T>
void assign_entries(const std::vector<CheckpointEntry>& entries, const std::vector<std::pair<std::string, Tensor<T>>>& params) {
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : entries)
        if (!by_name.emplace(e.name, &e).second) throw CheckpointError("checkpoint: duplicate entry " + e.name);
    std::map<std::string, Tensor<T>> targets(params.begin(), params.end());
    for (const auto& [name, e] : by_name) {
        auto it = targets.find(name);
        if (it == targets.end()) throw CheckpointError("checkpoint: unknown parameter name " + name);
        if (it->second.shape() != e->shape)
            throw CheckpointError("checkpoint: parameter " + name + " has shape " + shape_str(e->shape) + ", model expects " +
                                  shape_str(it->second.shape()));
    }
    for (const auto& [name, t] : targets)
        if (!by_name.count(name)) throw CheckpointError("checkpoint: missing parameter " + name);
    for (auto& [name, t] : targets) {
        auto d = t.data();
        const auto& v = by_name.at(name)->values;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(v[i]);
    }
}

template <class T>
std::vector<CheckpointEntry> collect_entries(const std::vector<std::pair<std::string, Tensor<T>>>& params) {
    std::vector<CheckpointEntry> out;
    for (const auto& [name, t] : params)
        out.push_back({name, t.shape(), std::vector<float>(t.values().begin(), t.values().end())});
    return out;
}

template <class T>
std::vector<std::uint8_t> encode_pban(const PbanModel<T>& model) {
    nlohmann::json meta = {{"channels", model.config.channels}, {"eps", model.config.eps}, {"dropout", model.config.dropout}};
    return encode_checkpoint("pban", std::move(meta), collect_entries(model.named_parameters()));
}

template <class T>
void save_checkpoint(const PbanModel<T>& model, const std::string& path) {
    write_file_bytes(path, encode_pban(model));
}

template <class T = float>
PbanModel<T> decode_pban(const std::vector<std::uint8_t>& bytes) {
    auto file = decode_checkpoint(bytes, "pban");
    PbanConfig cfg;
    try {
        cfg.channels = file.manifest.at("channels").get<std::size_t>();
        cfg.eps = file.manifest.at("eps").get<double>();
        cfg.dropout = file.manifest.at("dropout").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
    PbanModel<T> model(cfg);
    assign_entries(file.entries, model.named_parameters());
    return model;
}

template <class T = float>
PbanModel<T> load_checkpoint(const std::string& path) {
    try {
        return decode_pban<T>(read_file_bytes(path));
    } catch (const CheckpointError& e) {
        throw CheckpointError(path + ": " + e.what());
    }
}

}  // namespace epban
