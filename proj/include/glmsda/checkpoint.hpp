#pragma once

// Parameter checkpoints: <stem>.json manifest naming each tensor with its
// shape and byte offset, plus <stem>.bin holding raw little-endian float64
// values, row-major, concatenated in manifest order. Writes go through a
// temp file + rename so readers never observe a partial checkpoint.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "glmsda/tensor.hpp"

namespace glmsda {

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CheckpointEntry {
    std::string name;
    Tensor tensor;
};

namespace detail {

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

static_assert(sizeof(double) == 8, "checkpoint format assumes 64-bit doubles");

inline void append_f64_le(std::string& out, double x) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double read_f64_le(const std::string& bytes, size_t off) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[off + i])) << (8 * i);
    double x;
    std::memcpy(&x, &bits, 8);
    return x;
}

}  // namespace detail

// `tag` identifies what the checkpoint holds (e.g. "pretrained_rgb", "model").
// `extra` is merged into the manifest for format extensions (prototype bank
// initialization flags use it).
inline void save_checkpoint(const std::filesystem::path& stem, const std::string& tag,
                            const std::vector<CheckpointEntry>& entries,
                            const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["tag"] = tag;
    manifest["tensors"] = nlohmann::json::array();
    std::string bin;
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        nlohmann::json t;
        t["name"] = e.name;
        t["shape"] = e.tensor.shape;
        t["offset"] = offset;
        manifest["tensors"].push_back(t);
        for (double x : e.tensor.v) detail::append_f64_le(bin, x);
        offset += static_cast<std::uint64_t>(e.tensor.v.size()) * 8;
    }
    for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();

    std::filesystem::create_directories(stem.parent_path().empty() ? "." : stem.parent_path());
    std::filesystem::path json_path = stem;
    json_path += ".json";
    std::filesystem::path bin_path = stem;
    bin_path += ".bin";
    detail::write_file_atomic(json_path, manifest.dump(2) + "\n");
    detail::write_file_atomic(bin_path, bin);
}

struct Checkpoint {
    std::string tag;
    std::vector<CheckpointEntry> entries;
    nlohmann::json manifest;

    const Tensor* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e.tensor;
        return nullptr;
    }
};

inline Checkpoint load_checkpoint(const std::filesystem::path& stem) {
    std::filesystem::path json_path = stem;
    json_path += ".json";
    std::filesystem::path bin_path = stem;
    bin_path += ".bin";

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(detail::read_file(json_path));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed checkpoint manifest " + json_path.string() + ": " + e.what());
    }
    std::string bin = detail::read_file(bin_path);

    Checkpoint ck;
    ck.manifest = manifest;
    ck.tag = manifest.value("tag", "");
    for (const auto& t : manifest.at("tensors")) {
        std::vector<int> shape = t.at("shape").get<std::vector<int>>();
        std::uint64_t offset = t.at("offset").get<std::uint64_t>();
        int n = Tensor::count(shape);
        if (offset + static_cast<std::uint64_t>(n) * 8 > bin.size())
            throw IoError("checkpoint " + bin_path.string() + " truncated at tensor " +
                          t.at("name").get<std::string>());
        Tensor tensor(shape);
        for (int i = 0; i < n; ++i) tensor.v[static_cast<size_t>(i)] = detail::read_f64_le(bin, offset + static_cast<size_t>(i) * 8);
        ck.entries.push_back({t.at("name").get<std::string>(), std::move(tensor)});
    }
    return ck;
}

}  // namespace glmsda
