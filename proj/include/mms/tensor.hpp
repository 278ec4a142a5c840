#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mms/errors.hpp"

namespace mms {

// Dense NCHW tensor. Everything in this project is small enough that a flat
// vector plus explicit indexing beats a real tensor library.
template <typename T>
struct TensorT {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> v;

    TensorT() = default;
    TensorT(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_),
          v(static_cast<std::size_t>(n_) * c_ * h_ * w_, T(0)) {}

    static TensorT zeros_like(const TensorT& o) { return TensorT(o.n, o.c, o.h, o.w); }

    std::size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }

    std::size_t idx(int i, int j, int y, int x) const {
        return ((static_cast<std::size_t>(i) * c + j) * h + y) * w + x;
    }
    T& at(int i, int j, int y, int x) { return v[idx(i, j, y, x)]; }
    const T& at(int i, int j, int y, int x) const { return v[idx(i, j, y, x)]; }

    bool same_shape(const TensorT& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    std::string shape_str() const {
        return std::to_string(n) + "x" + std::to_string(c) + "x" +
               std::to_string(h) + "x" + std::to_string(w);
    }

    void fill(T x) { std::fill(v.begin(), v.end(), x); }

    void add_scaled(const TensorT& o, T scale) {
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += scale * o.v[i];
    }

    bool all_finite() const {
        for (T x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out(n, c, h, w);
        for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

template <typename T>
inline void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* where) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(where) + ": shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
}

template <typename T>
inline void require_finite(const TensorT<T>& a, const char* where) {
    if (!a.all_finite())
        throw ValidationError(std::string(where) + ": non-finite value in input");
}

}  // namespace mms
