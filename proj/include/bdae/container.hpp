#pragma once

// Binary container used for model checkpoints and cached tensors.
//
// Layout (all integers little-endian):
//   u8      format version (currently 1)
//   char[8] magic "BDAETNSR"
//   u8      payload kind (0 = checkpoint, 1 = tensor archive)
//   ...     kind-specific body written with the primitives below
//
// Strings are u32 length + bytes; shapes are u32 rank + i64 extents;
// numeric arrays are stored as f64 or f32 per an explicit dtype byte.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "bdae/errors.hpp"
#include "bdae/tensor.hpp"

namespace bdae {

constexpr uint8_t kContainerVersion = 1;
constexpr char kContainerMagic[8] = {'B', 'D', 'A', 'E', 'T', 'N', 'S', 'R'};
constexpr uint8_t kPayloadCheckpoint = 0;
constexpr uint8_t kPayloadTensors = 1;

class BinWriter {
public:
    explicit BinWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw IoError("cannot open '" + path + "' for writing");
    }

    template <typename P>
    void put(P v) {
        static_assert(std::is_trivially_copyable_v<P>);
        out_.write(reinterpret_cast<const char*>(&v), sizeof(P));
    }

    void put_str(const std::string& s) {
        put<uint32_t>(static_cast<uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

    void put_shape(const Shape& sh) {
        put<uint32_t>(static_cast<uint32_t>(sh.size()));
        for (int64_t e : sh) put<int64_t>(e);
    }

    template <typename P>
    void put_array(const P* data, size_t n) {
        out_.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(P)));
    }

    void put_f64_vec(const std::vector<double>& v) {
        put<uint32_t>(static_cast<uint32_t>(v.size()));
        put_array(v.data(), v.size());
    }

    void finish() {
        out_.flush();
        if (!out_) throw IoError("write failed for '" + path_ + "'");
        out_.close();
    }

private:
    std::string path_;
    std::ofstream out_;
};

class BinReader {
public:
    explicit BinReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open '" + path + "'");
    }

    template <typename P>
    P get() {
        P v{};
        in_.read(reinterpret_cast<char*>(&v), sizeof(P));
        if (!in_) throw IoError("truncated container '" + path_ + "'");
        return v;
    }

    std::string get_str() {
        uint32_t n = get<uint32_t>();
        std::string s(n, '\0');
        in_.read(s.data(), n);
        if (!in_) throw IoError("truncated container '" + path_ + "'");
        return s;
    }

    Shape get_shape() {
        uint32_t rank = get<uint32_t>();
        Shape sh(rank);
        for (uint32_t i = 0; i < rank; ++i) sh[i] = get<int64_t>();
        return sh;
    }

    template <typename P>
    void get_array(P* data, size_t n) {
        in_.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(P)));
        if (!in_) throw IoError("truncated container '" + path_ + "'");
    }

    std::vector<double> get_f64_vec() {
        uint32_t n = get<uint32_t>();
        std::vector<double> v(n);
        get_array(v.data(), v.size());
        return v;
    }

    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ifstream in_;
};

// Writes the common preamble and returns the writer.
inline void write_preamble(BinWriter& w, uint8_t payload_kind) {
    w.put<uint8_t>(kContainerVersion);
    w.put_array(kContainerMagic, sizeof(kContainerMagic));
    w.put<uint8_t>(payload_kind);
}

// Validates version/magic and the expected payload kind.
inline void read_preamble(BinReader& r, uint8_t expect_kind) {
    uint8_t version = r.get<uint8_t>();
    if (version != kContainerVersion)
        throw IoError("container '" + r.path() + "': unsupported version " + std::to_string(version));
    char magic[8];
    r.get_array(magic, sizeof(magic));
    if (std::memcmp(magic, kContainerMagic, sizeof(magic)) != 0)
        throw IoError("container '" + r.path() + "': bad magic");
    uint8_t kind = r.get<uint8_t>();
    if (kind != expect_kind)
        throw IoError("container '" + r.path() + "': payload kind " + std::to_string(kind) +
                      ", expected " + std::to_string(expect_kind));
}

// --- Tensor archive (payload kind 1): named float tensors -----------------

inline void save_tensor_archive(const std::string& path,
                                const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors) {
    BinWriter w(path);
    write_preamble(w, kPayloadTensors);
    w.put<uint32_t>(static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        w.put_str(name);
        w.put<uint8_t>(0);  // dtype: f32
        w.put_shape(t->shape);
        w.put_array(t->ptr(), static_cast<size_t>(t->numel()));
    }
    w.finish();
}

inline std::vector<std::pair<std::string, Tensor<float>>> load_tensor_archive(const std::string& path) {
    BinReader r(path);
    read_preamble(r, kPayloadTensors);
    uint32_t count = r.get<uint32_t>();
    std::vector<std::pair<std::string, Tensor<float>>> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.get_str();
        uint8_t dtype = r.get<uint8_t>();
        if (dtype != 0)
            throw IoError("container '" + path + "': tensor '" + name + "' has unsupported dtype");
        Shape sh = r.get_shape();
        Tensor<float> t(sh);
        r.get_array(t.ptr(), static_cast<size_t>(t.numel()));
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace bdae
