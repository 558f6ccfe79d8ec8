#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

#include "nslab/tensor.hpp"

namespace nslab {

// Named-tensor container format "NSLB1":
//   magic "NSLB1" (5 bytes)
//   u32 count
//   per entry: u32 name_len, name bytes (UTF-8), u32 rank,
//              rank * u32 extents, numel * f32 payload
// All integers and floats little-endian. Entries are written in key order.
using TensorMap = std::map<std::string, Tensor>;

namespace detail {
inline void put_u32(std::ostream& os, uint32_t x) {
    unsigned char b[4] = {static_cast<unsigned char>(x), static_cast<unsigned char>(x >> 8),
                          static_cast<unsigned char>(x >> 16), static_cast<unsigned char>(x >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
           (static_cast<uint32_t>(b[3]) << 24);
}
}  // namespace detail

inline void save_tensors(const std::string& path, const TensorMap& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    os.write("NSLB1", 5);
    detail::put_u32(os, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<uint32_t>(t.shape.size()));
        for (int e : t.shape) detail::put_u32(os, static_cast<uint32_t>(e));
        static_assert(sizeof(float) == 4);
        os.write(reinterpret_cast<const char*>(t.v.data()), static_cast<std::streamsize>(t.v.size() * 4));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline TensorMap load_tensors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, "NSLB1", 5) != 0) throw std::runtime_error("checkpoint: bad magic in " + path);
    uint32_t count = detail::get_u32(is);
    TensorMap out;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = detail::get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        uint32_t rank = detail::get_u32(is);
        std::vector<int> shape(rank);
        for (uint32_t r = 0; r < rank; ++r) shape[r] = static_cast<int>(detail::get_u32(is));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.v.data()), static_cast<std::streamsize>(t.v.size() * 4));
        if (!is) throw std::runtime_error("checkpoint: truncated entry '" + name + "' in " + path);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace nslab
