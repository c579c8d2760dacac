#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "datn/config.hpp"
#include "datn/tensor.hpp"

namespace datn {

// Checkpoint format: magic "DATN", version byte 0x01, u32-LE length-prefixed
// config blob (key=value lines), u32-LE tensor count, then per tensor a
// u32-LE length-prefixed name, rank (u32 LE), dims (u32 LE each) and the raw
// little-endian 64-bit floats. Round trips are bit-exact.

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BadMagicError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct VersionMismatchError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct TruncatedCheckpointError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct ConfigMismatchError : CheckpointError {
    using CheckpointError::CheckpointError;
};

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw TruncatedCheckpointError("checkpoint: truncated while reading u32");
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

inline void write_f64_le(std::ostream& out, const std::vector<double>& data) {
    static_assert(sizeof(double) == 8);
    // native little-endian layout on every supported target
    out.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * 8));
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelConfig& config,
                            const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("checkpoint: cannot write " + path);
    out.write("DATN", 4);
    const unsigned char version = 0x01;
    out.write(reinterpret_cast<const char*>(&version), 1);
    const std::string blob = config.to_kv();
    detail::write_u32(out, std::uint32_t(blob.size()));
    out.write(blob.data(), std::streamsize(blob.size()));
    detail::write_u32(out, std::uint32_t(tensors.size()));
    for (const auto& [name, tensor] : tensors) {
        detail::write_u32(out, std::uint32_t(name.size()));
        out.write(name.data(), std::streamsize(name.size()));
        detail::write_u32(out, std::uint32_t(tensor->shape.size()));
        for (std::size_t d : tensor->shape) detail::write_u32(out, std::uint32_t(d));
        detail::write_f64_le(out, tensor->data);
    }
    if (!out) throw CheckpointError("checkpoint: write failed for " + path);
}

struct LoadedCheckpoint {
    ModelConfig config;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot read " + path);
    char magic[4];
    if (!in.read(magic, 4)) throw TruncatedCheckpointError("checkpoint: missing magic");
    if (std::memcmp(magic, "DATN", 4) != 0)
        throw BadMagicError("checkpoint: bad magic bytes in " + path);
    unsigned char version = 0;
    if (!in.read(reinterpret_cast<char*>(&version), 1))
        throw TruncatedCheckpointError("checkpoint: missing version byte");
    if (version != 0x01)
        throw VersionMismatchError("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t blob_len = detail::read_u32(in);
    std::string blob(blob_len, '\0');
    if (!in.read(blob.data(), blob_len))
        throw TruncatedCheckpointError("checkpoint: truncated config blob");
    LoadedCheckpoint result;
    result.config.apply_kv(parse_kv(blob));
    const std::uint32_t count = detail::read_u32(in);
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint32_t name_len = detail::read_u32(in);
        std::string name(name_len, '\0');
        if (!in.read(name.data(), name_len))
            throw TruncatedCheckpointError("checkpoint: truncated tensor name");
        const std::uint32_t rank = detail::read_u32(in);
        std::vector<std::size_t> shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(detail::read_u32(in));
        Tensor tensor(shape);
        if (!in.read(reinterpret_cast<char*>(tensor.data.data()),
                     std::streamsize(tensor.numel() * 8)))
            throw TruncatedCheckpointError("checkpoint: truncated tensor data for " + name);
        result.tensors.emplace_back(std::move(name), std::move(tensor));
    }
    return result;
}

}  // namespace datn
