#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mixskd/common.hpp"

namespace mixskd {

// Dense n-dimensional array. Images and feature maps are [N,C,H,W],
// logits are [N,C], scalars have rank 0. Gradient bookkeeping lives on
// graph nodes (graph.hpp), not on the value type.
template <typename Real>
struct Tensor {
    std::vector<int> shape;
    std::vector<Real> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
            throw InvalidShapeError("data length does not match shape product");
    }

    static std::int64_t numel_of(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int e : s) {
            if (e < 0) throw InvalidShapeError("negative extent");
            n *= e;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) {
        Tensor t;
        std::int64_t n = numel_of(s);
        t.shape = std::move(s);
        t.data.assign(static_cast<std::size_t>(n), Real(0));
        return t;
    }

    static Tensor full(std::vector<int> s, Real v) {
        Tensor t = zeros(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(Real v) { return Tensor({}, {v}); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int extent(int axis) const { return shape[static_cast<std::size_t>(axis)]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    Real& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const Real& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    // 2-D and 4-D accessors for the common layouts.
    Real& at2(int n, int c) { return data[static_cast<std::size_t>(n) * shape[1] + c]; }
    const Real& at2(int n, int c) const { return data[static_cast<std::size_t>(n) * shape[1] + c]; }
    Real& at4(int n, int c, int h, int w) {
        return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    const Real& at4(int n, int c, int h, int w) const {
        return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }

    void add_(const Tensor& other) {
        if (!same_shape(other)) throw InvalidShapeError("add_: shape mismatch");
        for (std::size_t i = 0; i < data.size(); ++i) data[i] += other.data[i];
    }

    void fill(Real v) { std::fill(data.begin(), data.end(), v); }

    template <typename Other>
    Tensor<Other> cast() const {
        Tensor<Other> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<Other>(data[i]);
        return out;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << ']';
        return os.str();
    }
};

inline int conv_out_extent(int in, int kernel, int stride, int padding) {
    if (padding < 0 || stride <= 0) throw InvalidConfigError("conv: stride must be positive, padding non-negative");
    if (in + 2 * padding < kernel) throw InvalidConfigError("conv: kernel exceeds padded input");
    int out = (in + 2 * padding - kernel) / stride + 1;
    if (out < 1) throw InvalidConfigError("conv: empty output");
    return out;
}

// ---- Serialization -------------------------------------------------------
// Little-endian record: magic "MSKD", u32 version, u32 rank, u32 extents,
// then raw 32-bit floats in row-major order.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw FormatError("tensor record truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline constexpr std::uint32_t kTensorFormatVersion = 1;

inline void save_tensor(std::ostream& os, const Tensor<float>& t) {
    os.write("MSKD", 4);
    detail::put_u32(os, kTensorFormatVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int e : t.shape) detail::put_u32(os, static_cast<std::uint32_t>(e));
    for (float v : t.data) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
}

inline Tensor<float> load_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MSKD", 4) != 0) throw FormatError("bad tensor magic");
    std::uint32_t version = detail::get_u32(is);
    if (version != kTensorFormatVersion) throw FormatError("unsupported tensor format version " + std::to_string(version));
    std::uint32_t rank = detail::get_u32(is);
    if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
    std::vector<int> shape(rank);
    for (auto& e : shape) e = static_cast<int>(detail::get_u32(is));
    Tensor<float> t = Tensor<float>::zeros(shape);
    for (auto& v : t.data) v = std::bit_cast<float>(detail::get_u32(is));
    return t;
}

}  // namespace mixskd
