#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "droplora/errors.hpp"
#include "droplora/tensor.hpp"

namespace droplora {

// Checkpoint container, all integers little-endian:
//   magic "DLRA" | u32 version | u64 metadata length | metadata (UTF-8 JSON)
//   u32 tensor count, then per tensor:
//   u32 name length | name | u32 dtype (1 = f64) | u32 rank | rank x u64 dims
//   | 8 * prod(dims) payload bytes
inline constexpr char kCheckpointMagic[4] = {'D', 'L', 'R', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kDtypeF64 = 1;

struct NamedTensor {
    std::string name;
    TensorPtr tensor;
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::string metadata_json;
    std::vector<NamedTensor> tensors;

    TensorPtr find(const std::string& name) const {
        for (const auto& nt : tensors)
            if (nt.name == name) return nt.tensor;
        return nullptr;
    }
    TensorPtr require(const std::string& name) const {
        auto t = find(name);
        if (!t) throw IntegrityError("checkpoint is missing tensor '" + name + "'");
        return t;
    }
};

namespace detail {

struct ByteWriter {
    std::string buf;
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void bytes(const void* p, std::size_t n) {
        buf.append(static_cast<const char*>(p), n);
    }
};

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw IntegrityError("checkpoint truncated at offset " + std::to_string(pos) +
                                 " while reading " + what);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

} // namespace detail

/// Serializes to a temp file and renames into place, so a partial write
/// never leaves a file with a valid magic and a broken body.
inline void save_checkpoint(const std::filesystem::path& path, const std::string& metadata_json,
                            const std::vector<NamedTensor>& tensors) {
    std::set<std::string> seen;
    for (const auto& nt : tensors)
        if (!seen.insert(nt.name).second)
            throw ContractError("duplicate tensor name '" + nt.name + "' in checkpoint");

    detail::ByteWriter w;
    w.bytes(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    w.u64(metadata_json.size());
    w.bytes(metadata_json.data(), metadata_json.size());
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& nt : tensors) {
        w.u32(static_cast<std::uint32_t>(nt.name.size()));
        w.bytes(nt.name.data(), nt.name.size());
        w.u32(kDtypeF64);
        w.u32(static_cast<std::uint32_t>(nt.tensor->shape.size()));
        for (std::size_t d : nt.tensor->shape) w.u64(d);
        for (double v : nt.tensor->data) w.f64(v);
    }

    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IntegrityError("cannot open '" + tmp + "' for writing");
        out.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
        if (!out) {
            out.close();
            std::filesystem::remove(tmp);
            throw IntegrityError("short write to '" + tmp + "'");
        }
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("cannot open '" + path.string() + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    detail::ByteReader r{buf};

    const std::string magic = r.str(4, "magic");
    if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0)
        throw IntegrityError("bad checkpoint magic at offset 0 in '" + path.string() + "'");
    Checkpoint ck;
    ck.version = r.u32("version");
    if (ck.version != kCheckpointVersion)
        throw IntegrityError("unsupported checkpoint version " + std::to_string(ck.version) +
                             " at offset 4");
    const std::uint64_t meta_len = r.u64("metadata length");
    ck.metadata_json = r.str(meta_len, "metadata");
    const std::uint32_t count = r.u32("tensor count");
    std::set<std::string> seen;
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint32_t name_len = r.u32("tensor name length");
        std::string name = r.str(name_len, "tensor name");
        if (!seen.insert(name).second)
            throw IntegrityError("duplicate tensor name '" + name + "' at offset " +
                                 std::to_string(r.pos));
        const std::uint32_t dtype = r.u32("dtype tag");
        if (dtype != kDtypeF64)
            throw IntegrityError("unsupported dtype tag " + std::to_string(dtype) +
                                 " at offset " + std::to_string(r.pos - 4));
        const std::uint32_t rank = r.u32("tensor rank");
        Shape shape(rank);
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape[i] = r.u64("tensor dim");
            numel *= shape[i];
        }
        std::vector<double> data(numel);
        r.need(numel * 8, "tensor payload");
        for (std::size_t i = 0; i < numel; ++i) data[i] = r.f64("tensor payload");
        ck.tensors.push_back({std::move(name), make_tensor(std::move(shape), std::move(data))});
    }
    if (r.pos != buf.size())
        throw IntegrityError("trailing bytes at offset " + std::to_string(r.pos) + " in '" +
                             path.string() + "'");
    return ck;
}

} // namespace droplora
