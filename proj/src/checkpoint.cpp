#include "duin/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <set>

namespace duin {

using nlohmann::json;

namespace {

std::string header_path(const std::string& dir) { return dir + "/header.json"; }
std::string index_path(const std::string& dir) { return dir + "/tensors.idx"; }
std::string payload_path(const std::string& dir) { return dir + "/tensors.bin"; }

}  // namespace

void write_checkpoint_files(const std::string& dir, const CheckpointHeader& header,
                            const std::vector<TensorBlobEntry>& index,
                            const std::vector<char>& payload) {
    std::filesystem::create_directories(dir);

    json hj;
    hj["format_version"] = header.format_version;
    hj["stage"] = header.stage;
    hj["epoch"] = header.epoch;
    hj["config"] = header.config;
    hj["metrics"] = header.metrics;
    std::ofstream hout(header_path(dir), std::ios::trunc);
    if (!hout) throw std::runtime_error("cannot write " + header_path(dir));
    hout << hj.dump(2) << "\n";

    json ij = json::array();
    for (const auto& e : index) {
        ij.push_back({{"name", e.name},
                      {"dtype", e.dtype},
                      {"dims", e.dims},
                      {"byte_offset", e.byte_offset},
                      {"byte_len", e.byte_len}});
    }
    std::ofstream iout(index_path(dir), std::ios::trunc);
    if (!iout) throw std::runtime_error("cannot write " + index_path(dir));
    iout << ij.dump(2) << "\n";

    std::ofstream pout(payload_path(dir), std::ios::binary | std::ios::trunc);
    if (!pout) throw std::runtime_error("cannot write " + payload_path(dir));
    pout.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!pout) throw std::runtime_error("payload write failed in " + dir);
}

CheckpointHeader read_checkpoint_header(const std::string& dir) {
    std::ifstream in(header_path(dir));
    if (!in) throw std::runtime_error("missing checkpoint header " + header_path(dir));
    json hj = json::parse(in);
    CheckpointHeader header;
    header.format_version = hj.at("format_version").get<int>();
    if (header.format_version != 1) {
        throw std::runtime_error("checkpoint format_version " +
                                 std::to_string(header.format_version) +
                                 " is not supported (expected 1)");
    }
    header.stage = hj.at("stage").get<std::string>();
    header.epoch = hj.at("epoch").get<int>();
    header.config = hj.value("config", json::object());
    header.metrics = hj.value("metrics", json::object());
    return header;
}

std::vector<TensorBlobEntry> read_checkpoint_index(const std::string& dir) {
    read_checkpoint_header(dir);  // version gate
    std::ifstream in(index_path(dir));
    if (!in) throw std::runtime_error("missing checkpoint index " + index_path(dir));
    json ij = json::parse(in);
    std::vector<TensorBlobEntry> index;
    std::set<std::string> names;
    for (const auto& e : ij) {
        TensorBlobEntry entry;
        entry.name = e.at("name").get<std::string>();
        entry.dtype = e.at("dtype").get<std::string>();
        entry.dims = e.at("dims").get<std::vector<Index>>();
        entry.byte_offset = e.at("byte_offset").get<std::uint64_t>();
        entry.byte_len = e.at("byte_len").get<std::uint64_t>();
        if (!names.insert(entry.name).second) {
            throw std::runtime_error("checkpoint: duplicate tensor name " + entry.name);
        }
        index.push_back(std::move(entry));
    }
    return index;
}

std::vector<char> read_checkpoint_payload(const std::string& dir,
                                          const std::vector<TensorBlobEntry>& index) {
    std::ifstream in(payload_path(dir), std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("missing checkpoint payload " + payload_path(dir));
    const auto size = static_cast<std::uint64_t>(in.tellg());
    for (const auto& e : index) {
        if (e.byte_offset + e.byte_len > size) {
            throw std::runtime_error("checkpoint: index entry " + e.name +
                                     " points past the payload (truncated file?)");
        }
    }
    std::vector<char> payload(size);
    in.seekg(0);
    in.read(payload.data(), static_cast<std::streamsize>(size));
    if (!in) throw std::runtime_error("payload read failed in " + dir);
    return payload;
}

}  // namespace duin
