#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "porl/optim.hpp"
#include "porl/tensor.hpp"

namespace porl {

// Checkpoints are a flat list of named tensors. Per tensor:
//   u64 name length, name bytes, u64 rank, u64 dims..., f64 values...
// All integers and floats little-endian.
namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t x) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((x >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double d) {
    std::uint64_t x;
    std::memcpy(&x, &d, 8);
    put_u64(os, x);
}

inline bool get_u64(std::istream& is, std::uint64_t& x) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (is.gcount() != 8) return false;
    x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return true;
}

inline bool get_f64(std::istream& is, double& d) {
    std::uint64_t x;
    if (!get_u64(is, x)) return false;
    std::memcpy(&d, &x, 8);
    return true;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    for (const auto& nt : tensors) {
        detail::put_u64(os, nt.name.size());
        os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
        detail::put_u64(os, nt.tensor.rank());
        for (auto s : nt.tensor.shape()) detail::put_u64(os, s);
        for (double v : nt.tensor.values()) detail::put_f64(os, v);
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::vector<NamedTensor> out;
    std::uint64_t name_len;
    while (detail::get_u64(is, name_len)) {
        std::string name(name_len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(name_len));
        if (static_cast<std::uint64_t>(is.gcount()) != name_len)
            throw std::runtime_error("load_checkpoint: truncated name in " + path);
        std::uint64_t rank;
        if (!detail::get_u64(is, rank))
            throw std::runtime_error("load_checkpoint: truncated shape in " + path);
        std::vector<std::size_t> shape(rank);
        std::size_t n = 1;
        for (std::uint64_t i = 0; i < rank; ++i) {
            std::uint64_t dim;
            if (!detail::get_u64(is, dim))
                throw std::runtime_error("load_checkpoint: truncated shape in " + path);
            shape[i] = dim;
            n *= dim;
        }
        std::vector<double> values(n);
        for (std::size_t i = 0; i < n; ++i)
            if (!detail::get_f64(is, values[i]))
                throw std::runtime_error("load_checkpoint: truncated values in " + path);
        out.push_back({std::move(name), ad::Tensor::from(std::move(shape), std::move(values))});
    }
    return out;
}

// Copies loaded values into an existing registry, matching by name and shape.
inline void restore_into(std::vector<NamedTensor>& params, const std::vector<NamedTensor>& loaded) {
    for (auto& p : params) {
        const NamedTensor* found = nullptr;
        for (const auto& l : loaded)
            if (l.name == p.name) {
                found = &l;
                break;
            }
        if (!found) throw std::runtime_error("restore_into: missing tensor '" + p.name + "'");
        if (found->tensor.shape() != p.tensor.shape())
            throw std::runtime_error("restore_into: shape mismatch for '" + p.name + "': stored " +
                                     ad::shape_str(found->tensor.shape()) + " vs expected " +
                                     ad::shape_str(p.tensor.shape()));
        p.tensor.values() = found->tensor.values();
    }
}

}  // namespace porl
