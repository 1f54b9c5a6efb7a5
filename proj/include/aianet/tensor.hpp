#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "aianet/errors.hpp"

namespace aianet {

// 64-byte aligned storage for every numeric buffer. Fixed alignment keeps
// Eigen's vectorized kernels on one code path, which makes forward/backward
// results bitwise reproducible run to run (unaligned buffers get a
// pointer-dependent scalar peel whose exp/tanh differs from the SIMD path
// by an ulp).
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
    using value_type = T;
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) {}
    template <typename U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };
    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(Align)); }
    bool operator==(const AlignedAllocator&) const { return true; }
    bool operator!=(const AlignedAllocator&) const { return false; }
};

template <typename T>
using AVec = std::vector<T, AlignedAllocator<T, 64>>;

// Dense row-major real tensor. Values are immutable by convention after
// construction except for the gradient buffer, which the autodiff graph and
// the optimizer own between them.
template <typename T>
struct TensorT {
    std::vector<std::size_t> shape;
    AVec<T> data;
    AVec<T> grad;  // empty until backward touches this tensor
    bool requires_grad = false;

    TensorT() = default;

    explicit TensorT(std::vector<std::size_t> s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(numel_of(shape), fill);
    }

    TensorT(std::vector<std::size_t> s, AVec<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != numel_of(shape)) {
            throw DimensionError("tensor data size " + std::to_string(data.size()) +
                                 " does not match shape product " + std::to_string(numel_of(shape)));
        }
    }

    TensorT(std::vector<std::size_t> s, std::initializer_list<T> values)
        : TensorT(std::move(s), AVec<T>(values.begin(), values.end())) {}

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t e : s) n *= e;
        return n;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    // C x H x W accessor for feature maps.
    T& at3(std::size_t c, std::size_t h, std::size_t w) {
        return data[(c * shape[1] + h) * shape[2] + w];
    }
    const T& at3(std::size_t c, std::size_t h, std::size_t w) const {
        return data[(c * shape[1] + h) * shape[2] + w];
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.requires_grad = requires_grad;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << ']';
        return os.str();
    }
};

using real_t =
#ifdef AIANET_REAL64
    double;
#else
    float;
#endif

using Tensor = TensorT<real_t>;

// --- TSR1 serialization -----------------------------------------------------
// Little-endian: "TSR1", u32 rank, u32 extents..., float32 payload.

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}
inline std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw IoError("TSR1: truncated u32");
    std::uint32_t v;
    std::memcpy(&v, in.data() + pos, 4);
    pos += 4;
    return v;
}
}  // namespace detail

template <typename T>
void serialize_tensor(const TensorT<T>& t, std::string& out) {
    out.append("TSR1", 4);
    detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t e : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(e));
    for (T v : t.data) {
        float f = static_cast<float>(v);
        char b[4];
        std::memcpy(b, &f, 4);
        out.append(b, 4);
    }
}

template <typename T>
TensorT<T> deserialize_tensor(const std::string& in, std::size_t& pos) {
    if (pos + 4 > in.size() || std::memcmp(in.data() + pos, "TSR1", 4) != 0)
        throw IoError("TSR1: bad magic");
    pos += 4;
    const std::uint32_t rank = detail::get_u32(in, pos);
    std::vector<std::size_t> shape(rank);
    for (auto& e : shape) e = detail::get_u32(in, pos);
    TensorT<T> t(shape);
    if (pos + 4 * t.numel() > in.size()) throw IoError("TSR1: truncated payload");
    for (std::size_t i = 0; i < t.numel(); ++i) {
        float f;
        std::memcpy(&f, in.data() + pos, 4);
        pos += 4;
        t.data[i] = static_cast<T>(f);
    }
    return t;
}

}  // namespace aianet
