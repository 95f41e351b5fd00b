#pragma once

#include "duin/params.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <string>
#include <vector>

namespace duin {

/// Checkpoint directory layout: header.json (stage, config echo, epoch,
/// metric snapshot, format_version), tensors.idx (JSON index), tensors.bin
/// (raw little-endian payload).
struct CheckpointHeader {
    int format_version = 1;
    std::string stage;
    int epoch = 0;
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json metrics = nlohmann::json::object();
};

struct TensorBlobEntry {
    std::string name;
    std::string dtype;  // "f32" | "f64"
    std::vector<Index> dims;
    std::uint64_t byte_offset = 0;
    std::uint64_t byte_len = 0;
};

struct LoadReport {
    std::vector<std::string> matched;
    std::vector<std::string> missing;     // in the model, absent from the file
    std::vector<std::string> unexpected;  // in the file, absent from the model

    bool complete() const { return missing.empty() && unexpected.empty(); }
};

void write_checkpoint_files(const std::string& dir, const CheckpointHeader& header,
                            const std::vector<TensorBlobEntry>& index,
                            const std::vector<char>& payload);
CheckpointHeader read_checkpoint_header(const std::string& dir);
std::vector<TensorBlobEntry> read_checkpoint_index(const std::string& dir);
std::vector<char> read_checkpoint_payload(const std::string& dir,
                                          const std::vector<TensorBlobEntry>& index);

namespace detail {
template <typename T>
const char* dtype_name() {
    if constexpr (sizeof(T) == 4) return "f32";
    else return "f64";
}
}  // namespace detail

template <typename T>
void save_checkpoint(const ParamStore<T>& store, const std::string& dir,
                     const CheckpointHeader& header) {
    std::vector<TensorBlobEntry> index;
    std::vector<char> payload;
    for (const auto& entry : store.entries()) {
        TensorBlobEntry e;
        e.name = entry.name;
        e.dtype = detail::dtype_name<T>();
        e.dims = entry.var.value().dims();
        e.byte_offset = payload.size();
        e.byte_len = static_cast<std::uint64_t>(entry.var.value().size()) * sizeof(T);
        payload.resize(payload.size() + e.byte_len);
        std::memcpy(payload.data() + e.byte_offset, entry.var.value().data(), e.byte_len);
        index.push_back(std::move(e));
    }
    write_checkpoint_files(dir, header, index, payload);
}

/// Restores every file tensor whose name exists in the store, bitwise.
/// Dimension or dtype mismatches on a shared name throw; names on one side
/// only are reported so the caller can decide how strict to be.
template <typename T>
LoadReport load_checkpoint(ParamStore<T>& store, const std::string& dir) {
    const std::vector<TensorBlobEntry> index = read_checkpoint_index(dir);
    const std::vector<char> payload = read_checkpoint_payload(dir, index);

    LoadReport report;
    std::vector<bool> seen(index.size(), false);
    for (std::size_t i = 0; i < index.size(); ++i) {
        const auto& e = index[i];
        if (!store.has(e.name)) continue;
        seen[i] = true;
        Var<T>& var = store.at(e.name);
        if (e.dtype != detail::dtype_name<T>()) {
            throw std::runtime_error("checkpoint: dtype mismatch for " + e.name);
        }
        if (e.dims != var.value().dims()) {
            throw std::runtime_error("checkpoint: shape mismatch for " + e.name + ": file " +
                                     shape_str(e.dims) + " vs model " +
                                     shape_str(var.value().dims()));
        }
        std::memcpy(var.value().data(), payload.data() + e.byte_offset, e.byte_len);
        report.matched.push_back(e.name);
    }
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (!seen[i]) report.unexpected.push_back(index[i].name);
    }
    for (const auto& entry : store.entries()) {
        bool found = false;
        for (const auto& e : index) {
            if (e.name == entry.name) {
                found = true;
                break;
            }
        }
        if (!found) report.missing.push_back(entry.name);
    }
    return report;
}

}  // namespace duin
