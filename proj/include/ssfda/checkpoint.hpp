#pragma once

// Binary checkpoint format (all integers and floats little-endian):
//
//   "SSFD"                      4-byte magic
//   u16 version                 = kCheckpointVersion
//   u32 parameter count
//   per parameter, in ModelParams order:
//     u32 name length, UTF-8 name bytes
//     u32 rank, u32 dims[rank]
//     f64 values[prod(dims)]
//   u32 CRC-32 (zlib polynomial) of every preceding byte

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <zlib.h>

#include "segnet.hpp"

namespace ssfda {

inline constexpr char kCheckpointMagic[4] = {'S', 'S', 'F', 'D'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {

class ByteWriter {
public:
    template <typename T>
    void put(T v) {
        const auto* p = reinterpret_cast<const unsigned char*>(&v);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }
    void put_bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        bytes_.insert(bytes_.end(), p, p + n);
    }
    std::vector<unsigned char>& bytes() { return bytes_; }

private:
    std::vector<unsigned char> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<unsigned char>& b, std::size_t end) : b_(b), end_(end) {}

    template <typename T>
    T get() {
        T v;
        get_bytes(&v, sizeof(T));
        return v;
    }
    void get_bytes(void* out, std::size_t n) {
        if (pos_ + n > end_) throw Error("checkpoint: truncated payload");
        std::memcpy(out, b_.data() + pos_, n);
        pos_ += n;
    }
    std::size_t position() const { return pos_; }

private:
    const std::vector<unsigned char>& b_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = ::crc32(crc, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

} // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const ModelParams& params) {
    detail::ByteWriter w;
    w.put_bytes(kCheckpointMagic, 4);
    w.put<std::uint16_t>(kCheckpointVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        w.put_bytes(name.data(), name.size());
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
        w.put_bytes(t.values().data(), t.numel() * sizeof(double));
    }
    const auto crc = detail::crc32_of(w.bytes().data(), w.bytes().size());
    w.put<std::uint32_t>(crc);
    return std::move(w.bytes());
}

/// Parameters come back as grad-free leaves.
inline ModelParams deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 4 + 2 + 4 + 4) throw Error("checkpoint: file too short");
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + body, 4);
    if (detail::crc32_of(bytes.data(), body) != stored) throw Error("checkpoint: CRC mismatch (corrupt or truncated)");

    detail::ByteReader r(bytes, body);
    char magic[4];
    r.get_bytes(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw Error("checkpoint: bad magic");
    const auto version = r.get<std::uint16_t>();
    if (version != kCheckpointVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));
    const auto count = r.get<std::uint32_t>();
    ModelParams params;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name(r.get<std::uint32_t>(), '\0');
        r.get_bytes(name.data(), name.size());
        Shape shape(r.get<std::uint32_t>());
        for (auto& d : shape) d = r.get<std::uint32_t>();
        std::vector<double> values(numel_of(shape));
        r.get_bytes(values.data(), values.size() * sizeof(double));
        params.add(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    if (r.position() != body) throw Error("checkpoint: trailing bytes before CRC");
    return params;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + path.string());
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
    write_bytes(path, serialize_checkpoint(params));
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_bytes(path));
}

/// Throws if a checkpoint does not match the parameter table a config implies.
inline void check_layout(const ModelParams& params, const NetConfig& cfg) {
    const auto layout = param_layout(cfg);
    bool ok = layout.size() == params.size();
    for (std::size_t i = 0; ok && i < layout.size(); ++i)
        ok = layout[i].first == params[i].first && layout[i].second == params[i].second.shape();
    if (!ok) throw Error("checkpoint parameter table does not match the network config");
}

} // namespace ssfda
