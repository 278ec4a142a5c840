#pragma once

// Minimal CPU layer zoo with hand-written backward passes. Templated on the
// scalar type: training runs in float, the gradient-check tests instantiate
// double. Layers hold parameters and gradient accumulators; per-invocation
// state lives in explicit Cache structs so one layer can be driven through
// several forward/backward pairs per optimization step.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mms/errors.hpp"
#include "mms/gemm.hpp"
#include "mms/rng.hpp"
#include "mms/tensor.hpp"

namespace mms {

template <typename T>
struct ParamEntry {
    std::string name;
    TensorT<T>* value = nullptr;
    TensorT<T>* grad = nullptr;  // null for non-trainable buffers (BN running stats)
};

template <typename T>
using ParamVisitor = std::function<void(const ParamEntry<T>&)>;

namespace detail {

template <typename T>
std::vector<T>& im2col_scratch() {
    thread_local std::vector<T> buf;
    return buf;
}

template <typename T>
void im2col(const TensorT<T>& x, int image, int ksize, int pad, T* col) {
    const int kh = ksize, kw = ksize;
    const int h = x.h, w = x.w;
    std::size_t row = 0;
    for (int c = 0; c < x.c; ++c) {
        const T* plane = &x.v[(static_cast<std::size_t>(image) * x.c + c) * h * w];
        for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx) {
                T* dst = col + row * static_cast<std::size_t>(h) * w;
                ++row;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + dy - pad;
                    if (sy < 0 || sy >= h) {
                        std::fill(dst + static_cast<std::size_t>(y) * w,
                                  dst + static_cast<std::size_t>(y + 1) * w, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(sy) * w;
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = xx + dx - pad;
                        dst[static_cast<std::size_t>(y) * w + xx] =
                            (sx < 0 || sx >= w) ? T(0) : src[sx];
                    }
                }
            }
    }
}

template <typename T>
void col2im_accum(const T* col, int channels, int h, int w, int ksize, int pad, TensorT<T>& dx,
                  int image) {
    std::size_t row = 0;
    for (int c = 0; c < channels; ++c) {
        T* plane = &dx.v[(static_cast<std::size_t>(image) * channels + c) * h * w];
        for (int dy = 0; dy < ksize; ++dy)
            for (int dx_ = 0; dx_ < ksize; ++dx_) {
                const T* src = col + row * static_cast<std::size_t>(h) * w;
                ++row;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + dy - pad;
                    if (sy < 0 || sy >= h) continue;
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = xx + dx_ - pad;
                        if (sx < 0 || sx >= w) continue;
                        plane[static_cast<std::size_t>(sy) * w + sx] +=
                            src[static_cast<std::size_t>(y) * w + xx];
                    }
                }
            }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------

template <typename T>
struct Conv2d {
    int in_ch = 0, out_ch = 0, ksize = 3, pad = 1;
    TensorT<T> w, gw;  // (out, in, k, k)
    TensorT<T> b, gb;  // (1, out, 1, 1)

    struct Cache {
        TensorT<T> input;
    };

    Conv2d() = default;
    Conv2d(int in, int out, int k) : in_ch(in), out_ch(out), ksize(k), pad(k / 2) {
        w = TensorT<T>(out, in, k, k);
        gw = TensorT<T>(out, in, k, k);
        b = TensorT<T>(1, out, 1, 1);
        gb = TensorT<T>(1, out, 1, 1);
    }

    void init(std::mt19937_64& rng) {
        const double fan_in = static_cast<double>(in_ch) * ksize * ksize;
        std::normal_distribution<double> d(0.0, std::sqrt(2.0 / fan_in));
        for (auto& x : w.v) x = static_cast<T>(d(rng));
        b.fill(T(0));
    }

    TensorT<T> forward(const TensorT<T>& x, Cache& cache) const {
        const int hw = x.h * x.w;
        const int kk = in_ch * ksize * ksize;
        TensorT<T> y(x.n, out_ch, x.h, x.w);
        auto& col = detail::im2col_scratch<T>();
        if (ksize > 1) col.resize(static_cast<std::size_t>(kk) * hw);
        for (int i = 0; i < x.n; ++i) {
            const T* colp;
            if (ksize == 1) {
                colp = &x.v[static_cast<std::size_t>(i) * in_ch * hw];
            } else {
                detail::im2col(x, i, ksize, pad, col.data());
                colp = col.data();
            }
            T* out = &y.v[static_cast<std::size_t>(i) * out_ch * hw];
            gemm<T>(false, false, out_ch, hw, kk, T(1), w.v.data(), kk, colp, hw, T(0), out, hw);
            for (int c = 0; c < out_ch; ++c) {
                const T bias = b.v[c];
                T* plane = out + static_cast<std::size_t>(c) * hw;
                for (int s = 0; s < hw; ++s) plane[s] += bias;
            }
        }
        cache.input = x;
        return y;
    }

    TensorT<T> backward(const Cache& cache, const TensorT<T>& dy) {
        const TensorT<T>& x = cache.input;
        const int hw = x.h * x.w;
        const int kk = in_ch * ksize * ksize;
        TensorT<T> dx(x.n, in_ch, x.h, x.w);
        auto& col = detail::im2col_scratch<T>();
        std::vector<T> dcol(static_cast<std::size_t>(kk) * hw);
        if (ksize > 1) col.resize(static_cast<std::size_t>(kk) * hw);
        for (int i = 0; i < x.n; ++i) {
            const T* colp;
            if (ksize == 1) {
                colp = &x.v[static_cast<std::size_t>(i) * in_ch * hw];
            } else {
                detail::im2col(x, i, ksize, pad, col.data());
                colp = col.data();
            }
            const T* dyp = &dy.v[static_cast<std::size_t>(i) * out_ch * hw];
            // dW += dY * col^T ; db += row sums of dY
            gemm<T>(false, true, out_ch, kk, hw, T(1), dyp, hw, colp, hw, T(1), gw.v.data(), kk);
            for (int c = 0; c < out_ch; ++c) {
                T s = T(0);
                const T* plane = dyp + static_cast<std::size_t>(c) * hw;
                for (int p = 0; p < hw; ++p) s += plane[p];
                gb.v[c] += s;
            }
            // dcol = W^T * dY
            gemm<T>(true, false, kk, hw, out_ch, T(1), w.v.data(), kk, dyp, hw, T(0), dcol.data(),
                    hw);
            if (ksize == 1) {
                T* dst = &dx.v[static_cast<std::size_t>(i) * in_ch * hw];
                for (std::size_t s = 0; s < dcol.size(); ++s) dst[s] += dcol[s];
            } else {
                detail::col2im_accum(dcol.data(), in_ch, x.h, x.w, ksize, pad, dx, i);
            }
        }
        return dx;
    }

    void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
        fn({prefix + ".w", &w, &gw});
        fn({prefix + ".b", &b, &gb});
    }
};

// ---------------------------------------------------------------------------

template <typename T>
struct BatchNorm2d {
    int channels = 0;
    double momentum = 0.1, eps = 1e-5;
    TensorT<T> gamma, beta, g_gamma, g_beta;
    TensorT<T> running_mean, running_var;

    struct Cache {
        TensorT<T> xhat;
        std::vector<double> inv_std;
    };

    BatchNorm2d() = default;
    explicit BatchNorm2d(int ch) : channels(ch) {
        gamma = TensorT<T>(1, ch, 1, 1);
        beta = TensorT<T>(1, ch, 1, 1);
        g_gamma = TensorT<T>(1, ch, 1, 1);
        g_beta = TensorT<T>(1, ch, 1, 1);
        running_mean = TensorT<T>(1, ch, 1, 1);
        running_var = TensorT<T>(1, ch, 1, 1);
        gamma.fill(T(1));
        running_var.fill(T(1));
    }

    TensorT<T> forward(const TensorT<T>& x, Cache& cache, bool training) {
        const std::size_t plane = x.plane();
        const std::size_t count = static_cast<std::size_t>(x.n) * plane;
        TensorT<T> y = TensorT<T>::zeros_like(x);
        if (training) {
            cache.xhat = TensorT<T>::zeros_like(x);
            cache.inv_std.assign(channels, 0.0);
        }
        for (int c = 0; c < channels; ++c) {
            double mean, var;
            if (training) {
                double s = 0.0, s2 = 0.0;
                for (int i = 0; i < x.n; ++i) {
                    const T* p = &x.v[(static_cast<std::size_t>(i) * channels + c) * plane];
                    for (std::size_t k = 0; k < plane; ++k) {
                        s += p[k];
                        s2 += static_cast<double>(p[k]) * p[k];
                    }
                }
                mean = s / count;
                var = std::max(0.0, s2 / count - mean * mean);
                const double unbiased = count > 1 ? var * count / (count - 1.0) : var;
                running_mean.v[c] =
                    static_cast<T>((1.0 - momentum) * running_mean.v[c] + momentum * mean);
                running_var.v[c] =
                    static_cast<T>((1.0 - momentum) * running_var.v[c] + momentum * unbiased);
            } else {
                mean = running_mean.v[c];
                var = running_var.v[c];
            }
            const double inv = 1.0 / std::sqrt(var + eps);
            if (training) cache.inv_std[c] = inv;
            const double g = gamma.v[c], bb = beta.v[c];
            for (int i = 0; i < x.n; ++i) {
                const std::size_t off = (static_cast<std::size_t>(i) * channels + c) * plane;
                for (std::size_t k = 0; k < plane; ++k) {
                    const double xh = (x.v[off + k] - mean) * inv;
                    if (training) cache.xhat.v[off + k] = static_cast<T>(xh);
                    y.v[off + k] = static_cast<T>(g * xh + bb);
                }
            }
        }
        return y;
    }

    TensorT<T> backward(const Cache& cache, const TensorT<T>& dy) {
        const std::size_t plane = dy.plane();
        const double count = static_cast<double>(dy.n) * plane;
        TensorT<T> dx = TensorT<T>::zeros_like(dy);
        for (int c = 0; c < channels; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int i = 0; i < dy.n; ++i) {
                const std::size_t off = (static_cast<std::size_t>(i) * channels + c) * plane;
                for (std::size_t k = 0; k < plane; ++k) {
                    sum_dy += dy.v[off + k];
                    sum_dy_xhat += static_cast<double>(dy.v[off + k]) * cache.xhat.v[off + k];
                }
            }
            g_beta.v[c] += static_cast<T>(sum_dy);
            g_gamma.v[c] += static_cast<T>(sum_dy_xhat);
            const double coef = gamma.v[c] * cache.inv_std[c];
            for (int i = 0; i < dy.n; ++i) {
                const std::size_t off = (static_cast<std::size_t>(i) * channels + c) * plane;
                for (std::size_t k = 0; k < plane; ++k) {
                    dx.v[off + k] = static_cast<T>(
                        coef * (dy.v[off + k] - sum_dy / count -
                                cache.xhat.v[off + k] * sum_dy_xhat / count));
                }
            }
        }
        return dx;
    }

    void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
        fn({prefix + ".gamma", &gamma, &g_gamma});
        fn({prefix + ".beta", &beta, &g_beta});
        fn({prefix + ".running_mean", &running_mean, nullptr});
        fn({prefix + ".running_var", &running_var, nullptr});
    }
};

// ---------------------------------------------------------------------------

template <typename T>
struct ReLU {
    struct Cache {
        TensorT<T> out;
    };
    TensorT<T> forward(const TensorT<T>& x, Cache& cache) const {
        TensorT<T> y = x;
        for (auto& v : y.v) v = std::max(v, T(0));
        cache.out = y;
        return y;
    }
    TensorT<T> backward(const Cache& cache, const TensorT<T>& dy) const {
        TensorT<T> dx = dy;
        for (std::size_t i = 0; i < dx.v.size(); ++i)
            if (cache.out.v[i] <= T(0)) dx.v[i] = T(0);
        return dx;
    }
};

template <typename T>
struct MaxPool2 {
    struct Cache {
        std::vector<std::size_t> argmax;
        int n = 0, c = 0, h = 0, w = 0;  // input dims
    };
    TensorT<T> forward(const TensorT<T>& x, Cache& cache) const {
        if (x.h % 2 != 0 || x.w % 2 != 0)
            throw ShapeError("MaxPool2: input extent must be even, got " + x.shape_str());
        TensorT<T> y(x.n, x.c, x.h / 2, x.w / 2);
        cache.argmax.resize(y.size());
        cache.n = x.n;
        cache.c = x.c;
        cache.h = x.h;
        cache.w = x.w;
        std::size_t o = 0;
        for (int i = 0; i < x.n; ++i)
            for (int c = 0; c < x.c; ++c)
                for (int yy = 0; yy < y.h; ++yy)
                    for (int xx = 0; xx < y.w; ++xx, ++o) {
                        std::size_t best = x.idx(i, c, 2 * yy, 2 * xx);
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const std::size_t cand = x.idx(i, c, 2 * yy + dy, 2 * xx + dx);
                                if (x.v[cand] > x.v[best]) best = cand;
                            }
                        y.v[o] = x.v[best];
                        cache.argmax[o] = best;
                    }
        return y;
    }
    TensorT<T> backward(const Cache& cache, const TensorT<T>& dy) const {
        TensorT<T> dx(cache.n, cache.c, cache.h, cache.w);
        for (std::size_t o = 0; o < dy.v.size(); ++o) dx.v[cache.argmax[o]] += dy.v[o];
        return dx;
    }
};

template <typename T>
struct UpNearest2 {
    TensorT<T> forward(const TensorT<T>& x) const {
        TensorT<T> y(x.n, x.c, x.h * 2, x.w * 2);
        for (int i = 0; i < x.n; ++i)
            for (int c = 0; c < x.c; ++c)
                for (int yy = 0; yy < y.h; ++yy) {
                    const T* src = &x.v[x.idx(i, c, yy / 2, 0)];
                    T* dst = &y.v[y.idx(i, c, yy, 0)];
                    for (int xx = 0; xx < y.w; ++xx) dst[xx] = src[xx / 2];
                }
        return y;
    }
    TensorT<T> backward(const TensorT<T>& dy) const {
        TensorT<T> dx(dy.n, dy.c, dy.h / 2, dy.w / 2);
        for (int i = 0; i < dy.n; ++i)
            for (int c = 0; c < dy.c; ++c)
                for (int yy = 0; yy < dy.h; ++yy) {
                    const T* src = &dy.v[dy.idx(i, c, yy, 0)];
                    T* dst = &dx.v[dx.idx(i, c, yy / 2, 0)];
                    for (int xx = 0; xx < dy.w; ++xx) dst[xx / 2] += src[xx];
                }
        return dx;
    }
};

// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
    int in_dim = 0, out_dim = 0;
    TensorT<T> w, gw;  // (out, in, 1, 1)
    TensorT<T> b, gb;  // (1, out, 1, 1)

    struct Cache {
        TensorT<T> input;
    };

    Linear() = default;
    Linear(int in, int out) : in_dim(in), out_dim(out) {
        w = TensorT<T>(out, in, 1, 1);
        gw = TensorT<T>(out, in, 1, 1);
        b = TensorT<T>(1, out, 1, 1);
        gb = TensorT<T>(1, out, 1, 1);
    }

    void init(std::mt19937_64& rng) {
        std::normal_distribution<double> d(0.0, std::sqrt(2.0 / in_dim));
        for (auto& x : w.v) x = static_cast<T>(d(rng));
        b.fill(T(0));
    }

    // x: (B, in, 1, 1) -> (B, out, 1, 1)
    TensorT<T> forward(const TensorT<T>& x, Cache& cache) const {
        TensorT<T> y(x.n, out_dim, 1, 1);
        gemm<T>(false, true, x.n, out_dim, in_dim, T(1), x.v.data(), in_dim, w.v.data(), in_dim,
                T(0), y.v.data(), out_dim);
        for (int i = 0; i < x.n; ++i)
            for (int o = 0; o < out_dim; ++o) y.v[static_cast<std::size_t>(i) * out_dim + o] += b.v[o];
        cache.input = x;
        return y;
    }

    TensorT<T> backward(const Cache& cache, const TensorT<T>& dy) {
        const TensorT<T>& x = cache.input;
        TensorT<T> dx(x.n, in_dim, 1, 1);
        gemm<T>(true, false, out_dim, in_dim, x.n, T(1), dy.v.data(), out_dim, x.v.data(), in_dim,
                T(1), gw.v.data(), in_dim);
        for (int i = 0; i < x.n; ++i)
            for (int o = 0; o < out_dim; ++o) gb.v[o] += dy.v[static_cast<std::size_t>(i) * out_dim + o];
        gemm<T>(false, false, x.n, in_dim, out_dim, T(1), dy.v.data(), out_dim, w.v.data(), in_dim,
                T(0), dx.v.data(), in_dim);
        return dx;
    }

    void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
        fn({prefix + ".w", &w, &gw});
        fn({prefix + ".b", &b, &gb});
    }
};

// ---------------------------------------------------------------------------

// Sigmoid clamped into [kClampLo, 1-kClampLo] so downstream losses always see
// probabilities strictly inside (0,1).
template <typename T>
struct SigmoidClamped {
    static constexpr double kClampLo = 1e-6;
    struct Cache {
        TensorT<T> out;
    };
    TensorT<T> forward(const TensorT<T>& x, Cache& cache) const {
        TensorT<T> y = TensorT<T>::zeros_like(x);
        for (std::size_t i = 0; i < x.v.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(x.v[i])));
            y.v[i] = static_cast<T>(std::min(std::max(s, kClampLo), 1.0 - kClampLo));
        }
        cache.out = y;
        return y;
    }
    TensorT<T> backward(const Cache& cache, const TensorT<T>& dy) const {
        TensorT<T> dx = TensorT<T>::zeros_like(dy);
        for (std::size_t i = 0; i < dy.v.size(); ++i) {
            const double s = cache.out.v[i];
            dx.v[i] = static_cast<T>(dy.v[i] * s * (1.0 - s));
        }
        return dx;
    }
};

// Global average pool: (B, C, H, W) -> (B, C, 1, 1).
template <typename T>
struct GlobalAvgPool {
    struct Cache {
        int h = 0, w = 0;
    };
    TensorT<T> forward(const TensorT<T>& x, Cache& cache) const {
        cache.h = x.h;
        cache.w = x.w;
        TensorT<T> y(x.n, x.c, 1, 1);
        const std::size_t plane = x.plane();
        for (int i = 0; i < x.n; ++i)
            for (int c = 0; c < x.c; ++c) {
                double s = 0.0;
                const T* p = &x.v[(static_cast<std::size_t>(i) * x.c + c) * plane];
                for (std::size_t k = 0; k < plane; ++k) s += p[k];
                y.at(i, c, 0, 0) = static_cast<T>(s / plane);
            }
        return y;
    }
    TensorT<T> backward(const Cache& cache, const TensorT<T>& dy) const {
        TensorT<T> dx(dy.n, dy.c, cache.h, cache.w);
        const std::size_t plane = dx.plane();
        for (int i = 0; i < dy.n; ++i)
            for (int c = 0; c < dy.c; ++c) {
                const T g = static_cast<T>(dy.at(i, c, 0, 0) / static_cast<double>(plane));
                T* p = &dx.v[(static_cast<std::size_t>(i) * dx.c + c) * plane];
                for (std::size_t k = 0; k < plane; ++k) p[k] = g;
            }
        return dx;
    }
};

// L2 normalization of each channel fiber at every (batch, spatial) site.
// For (B, D, 1, 1) inputs it degenerates to row normalization.
template <typename T>
struct L2NormalizeFibers {
    static constexpr double kEps = 1e-12;
    struct Cache {
        TensorT<T> out;
        std::vector<double> norms;  // per (b, s)
    };
    TensorT<T> forward(const TensorT<T>& x, Cache& cache) const {
        TensorT<T> y = TensorT<T>::zeros_like(x);
        const std::size_t plane = x.plane();
        cache.norms.assign(static_cast<std::size_t>(x.n) * plane, 0.0);
        for (int i = 0; i < x.n; ++i)
            for (std::size_t s = 0; s < plane; ++s) {
                double n2 = 0.0;
                for (int c = 0; c < x.c; ++c) {
                    const double v = x.v[(static_cast<std::size_t>(i) * x.c + c) * plane + s];
                    n2 += v * v;
                }
                const double r = std::max(std::sqrt(n2), kEps);
                cache.norms[static_cast<std::size_t>(i) * plane + s] = r;
                for (int c = 0; c < x.c; ++c) {
                    const std::size_t at = (static_cast<std::size_t>(i) * x.c + c) * plane + s;
                    y.v[at] = static_cast<T>(x.v[at] / r);
                }
            }
        cache.out = y;
        return y;
    }
    TensorT<T> backward(const Cache& cache, const TensorT<T>& dy) const {
        TensorT<T> dx = TensorT<T>::zeros_like(dy);
        const std::size_t plane = dy.plane();
        for (int i = 0; i < dy.n; ++i)
            for (std::size_t s = 0; s < plane; ++s) {
                const double r = cache.norms[static_cast<std::size_t>(i) * plane + s];
                double ydy = 0.0;
                for (int c = 0; c < dy.c; ++c) {
                    const std::size_t at = (static_cast<std::size_t>(i) * dy.c + c) * plane + s;
                    ydy += static_cast<double>(cache.out.v[at]) * dy.v[at];
                }
                for (int c = 0; c < dy.c; ++c) {
                    const std::size_t at = (static_cast<std::size_t>(i) * dy.c + c) * plane + s;
                    dx.v[at] = static_cast<T>((dy.v[at] - cache.out.v[at] * ydy) / r);
                }
            }
        return dx;
    }
};

// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.n != b.n || a.h != b.h || a.w != b.w)
        throw ShapeError("concat_channels: " + a.shape_str() + " vs " + b.shape_str());
    TensorT<T> y(a.n, a.c + b.c, a.h, a.w);
    const std::size_t plane = a.plane();
    for (int i = 0; i < a.n; ++i) {
        std::copy(&a.v[static_cast<std::size_t>(i) * a.c * plane],
                  &a.v[static_cast<std::size_t>(i) * a.c * plane] + a.c * plane,
                  &y.v[static_cast<std::size_t>(i) * y.c * plane]);
        std::copy(&b.v[static_cast<std::size_t>(i) * b.c * plane],
                  &b.v[static_cast<std::size_t>(i) * b.c * plane] + b.c * plane,
                  &y.v[static_cast<std::size_t>(i) * y.c * plane + a.c * plane]);
    }
    return y;
}

template <typename T>
void split_channels_grad(const TensorT<T>& dy, int c_a, TensorT<T>& da, TensorT<T>& db) {
    const int c_b = dy.c - c_a;
    da = TensorT<T>(dy.n, c_a, dy.h, dy.w);
    db = TensorT<T>(dy.n, c_b, dy.h, dy.w);
    const std::size_t plane = dy.plane();
    for (int i = 0; i < dy.n; ++i) {
        std::copy(&dy.v[static_cast<std::size_t>(i) * dy.c * plane],
                  &dy.v[static_cast<std::size_t>(i) * dy.c * plane] + c_a * plane,
                  &da.v[static_cast<std::size_t>(i) * c_a * plane]);
        std::copy(&dy.v[static_cast<std::size_t>(i) * dy.c * plane + c_a * plane],
                  &dy.v[static_cast<std::size_t>(i) * dy.c * plane] + dy.c * plane,
                  &db.v[static_cast<std::size_t>(i) * c_b * plane]);
    }
}

}  // namespace mms
