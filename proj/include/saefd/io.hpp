#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "saefd/common.hpp"

namespace saefd {

// Little-endian binary stream helpers. All on-disk formats in this project
// ("SFDM" checkpoints, "SFDA" anchors, "SFDD" datasets) are written through
// these, byte for byte.

class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw format_error("cannot open for writing: " + path);
    }

    void u8(std::uint8_t v) { raw(&v, 1); }
    void u16(std::uint16_t v) { le(v); }
    void u32(std::uint32_t v) { le(v); }
    void u64(std::uint64_t v) { le(v); }
    void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }

    void bytes(const void* p, std::size_t n) { raw(p, n); }

    void f32_array(const float* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) f32(p[i]);
    }
    void u16_array(const std::uint16_t* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) u16(p[i]);
    }

    void close() {
        out_.close();
        if (!out_) throw format_error("write failed: " + path_);
    }

private:
    template <typename U>
    void le(U v) {
        std::uint8_t buf[sizeof(U)];
        for (std::size_t i = 0; i < sizeof(U); ++i)
            buf[i] = static_cast<std::uint8_t>((v >> (8 * i)) & 0xffu);
        raw(buf, sizeof(U));
    }
    void raw(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!out_) throw format_error("write failed: " + path_);
    }

    std::string path_;
    std::ofstream out_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw format_error("cannot open: " + path);
    }

    std::uint8_t u8() {
        std::uint8_t v;
        raw(&v, 1);
        return v;
    }
    std::uint16_t u16() { return le<std::uint16_t>(); }
    std::uint32_t u32() { return le<std::uint32_t>(); }
    std::uint64_t u64() { return le<std::uint64_t>(); }
    float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }

    void bytes(void* p, std::size_t n) { raw(p, n); }

    void f32_array(float* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) p[i] = f32();
    }
    void u16_array(std::uint16_t* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) p[i] = u16();
    }

    std::size_t offset() const { return offset_; }

    bool at_eof() {
        in_.peek();
        return in_.eof();
    }

    void expect_eof() {
        if (!at_eof())
            throw format_error(path_ + ": trailing bytes at offset " + std::to_string(offset_));
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw format_error(path_ + ": " + what + " at offset " + std::to_string(offset_));
    }

private:
    template <typename U>
    U le() {
        std::uint8_t buf[sizeof(U)];
        raw(buf, sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
        return v;
    }
    void raw(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw format_error(path_ + ": truncated at offset " +
                               std::to_string(offset_ + static_cast<std::size_t>(in_.gcount())));
        offset_ += n;
    }

    std::string path_;
    std::ifstream in_;
    std::size_t offset_ = 0;
};

// ---------------------------------------------------------------------------
// "SFDM" checkpoint container: magic, version u16, artifact kind u16, then
// named f32 tensors (name length u16, name bytes, rank u8, dims u32[], data
// row-major) until end of file.

enum class ArtifactKind : std::uint16_t { model = 1, sae = 2, adapter = 3 };

inline constexpr std::uint16_t kSfdmVersion = 1;

struct NamedTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;

    static NamedTensor from_mat(std::string name, const MatF& m) {
        NamedTensor t;
        t.name = std::move(name);
        t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
        t.data.assign(m.data(), m.data() + m.size());
        return t;
    }

    MatF to_mat() const {
        if (dims.size() != 2)
            throw format_error("tensor '" + name + "' is rank " + std::to_string(dims.size()) +
                               ", expected 2");
        MatF m(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
        if (static_cast<std::size_t>(m.size()) != data.size())
            throw format_error("tensor '" + name + "' size mismatch");
        std::copy(data.begin(), data.end(), m.data());
        return m;
    }
};

inline void save_sfdm(const std::string& path, ArtifactKind kind,
                      const std::vector<NamedTensor>& tensors) {
    BinaryWriter w(path);
    w.bytes("SFDM", 4);
    w.u16(kSfdmVersion);
    w.u16(static_cast<std::uint16_t>(kind));
    for (const auto& t : tensors) {
        if (t.name.size() > 0xffff) throw usage_error("tensor name too long: " + t.name);
        w.u16(static_cast<std::uint16_t>(t.name.size()));
        w.bytes(t.name.data(), t.name.size());
        w.u8(static_cast<std::uint8_t>(t.dims.size()));
        std::size_t count = 1;
        for (auto d : t.dims) {
            w.u32(d);
            count *= d;
        }
        if (count != t.data.size()) throw usage_error("tensor '" + t.name + "' dims/data mismatch");
        w.f32_array(t.data.data(), t.data.size());
    }
    w.close();
}

struct SfdmFile {
    ArtifactKind kind;
    std::vector<NamedTensor> tensors;

    const NamedTensor& get(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw format_error("checkpoint is missing tensor '" + name + "'");
    }
};

inline SfdmFile load_sfdm(const std::string& path) {
    BinaryReader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::string(magic, 4) != "SFDM") r.fail("bad magic");
    const std::uint16_t version = r.u16();
    if (version != kSfdmVersion) r.fail("unsupported version " + std::to_string(version));
    SfdmFile f;
    f.kind = static_cast<ArtifactKind>(r.u16());
    while (!r.at_eof()) {
        NamedTensor t;
        const std::uint16_t name_len = r.u16();
        t.name.resize(name_len);
        r.bytes(t.name.data(), name_len);
        const std::uint8_t rank = r.u8();
        std::size_t count = 1;
        for (int i = 0; i < rank; ++i) {
            t.dims.push_back(r.u32());
            count *= t.dims.back();
        }
        t.data.resize(count);
        r.f32_array(t.data.data(), count);
        f.tensors.push_back(std::move(t));
    }
    return f;
}

inline std::uint64_t file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw format_error("cannot open: " + path);
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    return h;
}

}  // namespace saefd
