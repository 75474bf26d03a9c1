#pragma once
// Sparse tensor kernels. Every accumulation that feeds a float result runs in
// a fixed serial order per output cell; OpenMP parallelism is only across
// independent cells/channels, so results are bit-identical at any thread count.

#include <cmath>
#include <cstdint>
#include <vector>

#include "gsdn/common.hpp"
#include "gsdn/kernel_map.hpp"
#include "gsdn/lattice.hpp"

namespace gsdn {

// Weights laid out [offset][c_in][c_out], offset index per KernelMap:
// k = ((dx+K)*S + (dy+K))*S + (dz+K), S = kernel_size.
template <typename T>
inline void check_conv_shapes(const FeatMat<T>& w, int kernel_size, int c_in, int c_out) {
    const std::int64_t vol = std::int64_t(kernel_size) * kernel_size * kernel_size;
    if (w.rows != vol * c_in || w.cols != c_out)
        throw ContractError("conv weight shape mismatch");
}

// out[o][co] = sum over map entries (k, i) of in[i][ci] * W[k][ci][co].
template <typename T>
FeatMat<T> conv_forward(const FeatMat<T>& in, const FeatMat<T>& w, const KernelMap& map) {
    const int c_in = int(in.cols), c_out = int(w.cols);
    check_conv_shapes(w, map.kernel_size, c_in, c_out);
    FeatMat<T> out(map.n_out, c_out);
#pragma omp parallel for schedule(static) if (map.n_out > 64)
    for (int o = 0; o < map.n_out; ++o) {
        T* dst = out.row(o);
        for (int e = map.out_begin[o]; e < map.out_begin[o + 1]; ++e) {
            const auto [k, i] = map.by_out[e];
            const T* src = in.row(i);
            const T* wk = w.data.data() + std::int64_t(k) * c_in * c_out;
            for (int ci = 0; ci < c_in; ++ci) {
                const T v = src[ci];
                const T* wrow = wk + std::int64_t(ci) * c_out;
                for (int co = 0; co < c_out; ++co) dst[co] += v * wrow[co];
            }
        }
    }
    return out;
}

// gin[i][ci] = sum over entries (k, o) at input row i of gout[o][co] * W[k][ci][co]
// gw[k][ci][co] = sum over entries of in[i][ci] * gout[o][co], fixed global order.
template <typename T>
void conv_backward(const FeatMat<T>& in, const FeatMat<T>& w, const KernelMap& map,
                   const FeatMat<T>& gout, FeatMat<T>& gin, FeatMat<T>& gw) {
    const int c_in = int(in.cols), c_out = int(w.cols);
    gin = FeatMat<T>(map.n_in, c_in);
    gw = FeatMat<T>(w.rows, w.cols);
#pragma omp parallel for schedule(static) if (map.n_in > 64)
    for (int i = 0; i < map.n_in; ++i) {
        T* dst = gin.row(i);
        for (int e = map.in_begin[i]; e < map.in_begin[i + 1]; ++e) {
            const auto [k, o] = map.by_in[e];
            const T* g = gout.row(o);
            const T* wk = w.data.data() + std::int64_t(k) * c_in * c_out;
            for (int ci = 0; ci < c_in; ++ci) {
                const T* wrow = wk + std::int64_t(ci) * c_out;
                T acc = 0;
                for (int co = 0; co < c_out; ++co) acc += g[co] * wrow[co];
                dst[ci] += acc;
            }
        }
    }
    // Weight gradient: parallel across output channels, entries visited in the
    // same global order for each, so each gw element accumulates serially.
#pragma omp parallel for schedule(static) if (c_out > 1 && map.entries() > 4096)
    for (int co = 0; co < c_out; ++co) {
        for (int o = 0; o < map.n_out; ++o) {
            const T g = gout.row(o)[co];
            if (g == T(0)) continue;
            for (int e = map.out_begin[o]; e < map.out_begin[o + 1]; ++e) {
                const auto [k, i] = map.by_out[e];
                const T* src = in.row(i);
                T* grow = gw.data.data() + std::int64_t(k) * c_in * c_out + co;
                for (int ci = 0; ci < c_in; ++ci) grow[std::int64_t(ci) * c_out] += src[ci] * g;
            }
        }
    }
}

template <typename T>
FeatMat<T> add_bias(const FeatMat<T>& in, const std::vector<T>& bias) {
    if (std::int64_t(bias.size()) != in.cols) throw ContractError("bias size mismatch");
    FeatMat<T> out = in;
#pragma omp parallel for schedule(static) if (out.rows > 256)
    for (std::int64_t r = 0; r < out.rows; ++r) {
        T* row = out.row(r);
        for (std::int64_t c = 0; c < out.cols; ++c) row[c] += bias[c];
    }
    return out;
}

// Column sums of gout in fixed row order.
template <typename T>
std::vector<T> bias_backward(const FeatMat<T>& gout) {
    std::vector<T> gb(gout.cols, T(0));
#pragma omp parallel for schedule(static) if (gout.cols > 4)
    for (std::int64_t c = 0; c < gout.cols; ++c) {
        T acc = 0;
        for (std::int64_t r = 0; r < gout.rows; ++r) acc += gout.at(r, c);
        gb[c] = acc;
    }
    return gb;
}

template <typename T>
struct BnState {
    std::vector<T> mean, istd;  // per channel, saved by train forward for backward
};

// Train mode: normalize with in-batch biased variance, update running stats
// r <- (1-momentum)*r + momentum*batch_stat. Eval mode: normalize with running stats.
template <typename T>
FeatMat<T> bn_forward(const FeatMat<T>& in, const std::vector<T>& gamma, const std::vector<T>& beta,
                      std::vector<T>& run_mean, std::vector<T>& run_var, T eps, T momentum,
                      bool train, BnState<T>* state) {
    const std::int64_t n = in.rows, c = in.cols;
    if (std::int64_t(gamma.size()) != c || std::int64_t(beta.size()) != c ||
        std::int64_t(run_mean.size()) != c || std::int64_t(run_var.size()) != c)
        throw ContractError("bn parameter shape mismatch");
    if (train && n < 2) throw ContractError("bn train mode requires nnz >= 2");
    FeatMat<T> out(n, c);
    if (state) { state->mean.assign(c, T(0)); state->istd.assign(c, T(0)); }
#pragma omp parallel for schedule(static) if (c > 4)
    for (std::int64_t j = 0; j < c; ++j) {
        T mean, var;
        if (train) {
            T s = 0;
            for (std::int64_t r = 0; r < n; ++r) s += in.at(r, j);
            mean = s / T(n);
            T sq = 0;
            for (std::int64_t r = 0; r < n; ++r) {
                const T d = in.at(r, j) - mean;
                sq += d * d;
            }
            var = sq / T(n);
            run_mean[j] = (T(1) - momentum) * run_mean[j] + momentum * mean;
            run_var[j] = (T(1) - momentum) * run_var[j] + momentum * var;
        } else {
            mean = run_mean[j];
            var = run_var[j];
        }
        const T istd = T(1) / std::sqrt(var + eps);
        if (state) { state->mean[j] = mean; state->istd[j] = istd; }
        const T g = gamma[j], b = beta[j];
        for (std::int64_t r = 0; r < n; ++r) out.at(r, j) = (in.at(r, j) - mean) * istd * g + b;
    }
    return out;
}

template <typename T>
void bn_backward(const FeatMat<T>& in, const std::vector<T>& gamma, const BnState<T>& st,
                 const FeatMat<T>& gout, bool train, FeatMat<T>& gin, std::vector<T>& ggamma,
                 std::vector<T>& gbeta) {
    const std::int64_t n = in.rows, c = in.cols;
    gin = FeatMat<T>(n, c);
    ggamma.assign(c, T(0));
    gbeta.assign(c, T(0));
#pragma omp parallel for schedule(static) if (c > 4)
    for (std::int64_t j = 0; j < c; ++j) {
        const T mean = st.mean[j], istd = st.istd[j], g = gamma[j];
        T sum_gy = 0, sum_gy_xhat = 0;
        for (std::int64_t r = 0; r < n; ++r) {
            const T gy = gout.at(r, j);
            sum_gy += gy;
            sum_gy_xhat += gy * (in.at(r, j) - mean) * istd;
        }
        gbeta[j] = sum_gy;
        ggamma[j] = sum_gy_xhat;
        if (train) {
            // dx = (g*istd/N) * (N*gy - sum_gy - xhat*sum_gy_xhat)
            const T scale = g * istd / T(n);
            for (std::int64_t r = 0; r < n; ++r) {
                const T xhat = (in.at(r, j) - mean) * istd;
                gin.at(r, j) = scale * (T(n) * gout.at(r, j) - sum_gy - xhat * sum_gy_xhat);
            }
        } else {
            for (std::int64_t r = 0; r < n; ++r) gin.at(r, j) = gout.at(r, j) * g * istd;
        }
    }
}

template <typename T>
FeatMat<T> relu_forward(const FeatMat<T>& in) {
    FeatMat<T> out = in;
    const std::int64_t total = out.rows * out.cols;
#pragma omp parallel for schedule(static) if (total > 4096)
    for (std::int64_t i = 0; i < total; ++i)
        if (out.data[i] < T(0)) out.data[i] = T(0);
    return out;
}

template <typename T>
FeatMat<T> relu_backward(const FeatMat<T>& in, const FeatMat<T>& gout) {
    FeatMat<T> gin = gout;
    const std::int64_t total = gin.rows * gin.cols;
#pragma omp parallel for schedule(static) if (total > 4096)
    for (std::int64_t i = 0; i < total; ++i)
        if (in.data[i] <= T(0)) gin.data[i] = T(0);
    return gin;
}

template <typename T>
inline T logistic_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
FeatMat<T> logistic_forward(const FeatMat<T>& in) {
    FeatMat<T> out(in.rows, in.cols);
    const std::int64_t total = out.rows * out.cols;
#pragma omp parallel for schedule(static) if (total > 4096)
    for (std::int64_t i = 0; i < total; ++i) out.data[i] = logistic_scalar(in.data[i]);
    return out;
}

template <typename T>
FeatMat<T> logistic_backward(const FeatMat<T>& y, const FeatMat<T>& gout) {
    FeatMat<T> gin(y.rows, y.cols);
    const std::int64_t total = gin.rows * gin.cols;
#pragma omp parallel for schedule(static) if (total > 4096)
    for (std::int64_t i = 0; i < total; ++i)
        gin.data[i] = gout.data[i] * y.data[i] * (T(1) - y.data[i]);
    return gin;
}

// Row subset in original order; `rows` must be strictly increasing indices.
template <typename T>
FeatMat<T> gather_rows(const FeatMat<T>& in, const std::vector<int>& rows) {
    FeatMat<T> out(std::int64_t(rows.size()), in.cols);
#pragma omp parallel for schedule(static) if (rows.size() > 256)
    for (std::int64_t r = 0; r < std::int64_t(rows.size()); ++r)
        std::copy(in.row(rows[r]), in.row(rows[r]) + in.cols, out.row(r));
    return out;
}

template <typename T>
FeatMat<T> scatter_rows_grad(const FeatMat<T>& gout, const std::vector<int>& rows,
                             std::int64_t n_in) {
    FeatMat<T> gin(n_in, gout.cols);
#pragma omp parallel for schedule(static) if (rows.size() > 256)
    for (std::int64_t r = 0; r < std::int64_t(rows.size()); ++r)
        std::copy(gout.row(r), gout.row(r) + gout.cols, gin.row(rows[r]));
    return gin;
}

inline std::vector<int> mask_to_rows(const std::vector<char>& keep) {
    std::vector<int> rows;
    for (int i = 0; i < int(keep.size()); ++i)
        if (keep[i]) rows.push_back(i);
    return rows;
}

// ---------------------------------------------------------------------------
// Serial reference implementations. These probe the coordinate map directly
// instead of going through a KernelMap, and never spawn threads; the parallel
// kernels above must match them bitwise (same per-cell accumulation order).
namespace ref {

template <typename T>
SparseTensor<T> conv(const SparseTensor<T>& in, const FeatMat<T>& w, int kernel_size,
                     int stride_factor) {
    const int K = kernel_size / 2, S = kernel_size;
    const int c_in = int(in.channels()), c_out = int(w.cols);
    check_conv_shapes(w, kernel_size, c_in, c_out);
    std::vector<Coord> out_coords =
        stride_factor == 2 ? strided_out_coords(in.coords, in.stride) : in.coords;
    const CoordMap cmap = build_coord_map(in.coords);
    const int s = in.stride;
    SparseTensor<T> out;
    out.coords = out_coords;
    out.stride = in.stride * stride_factor;
    out.feats = FeatMat<T>(std::int64_t(out_coords.size()), c_out);
    for (std::size_t o = 0; o < out_coords.size(); ++o) {
        const Coord oc = out_coords[o];
        T* dst = out.feats.row(o);
        for (int dx = -K; dx <= K; ++dx)
            for (int dy = -K; dy <= K; ++dy)
                for (int dz = -K; dz <= K; ++dz) {
                    const Coord probe{oc.b, oc.x + dx * s, oc.y + dy * s, oc.z + dz * s};
                    auto it = cmap.find(coord_key(probe));
                    if (it == cmap.end()) continue;
                    const int k = ((dx + K) * S + (dy + K)) * S + (dz + K);
                    const T* src = in.feats.row(it->second);
                    const T* wk = w.data.data() + std::int64_t(k) * c_in * c_out;
                    for (int ci = 0; ci < c_in; ++ci)
                        for (int co = 0; co < c_out; ++co)
                            dst[co] += src[ci] * wk[std::int64_t(ci) * c_out + co];
                }
    }
    return out;
}

template <typename T>
SparseTensor<T> conv_transpose(const SparseTensor<T>& in, const FeatMat<T>& w) {
    const int K = 1, S = 3;
    const int c_in = int(in.channels()), c_out = int(w.cols);
    check_conv_shapes(w, 3, c_in, c_out);
    if (in.stride % 2) throw ContractError("transposed conv requires even input stride");
    const int s = in.stride / 2;
    std::vector<Coord> out_coords = transposed_out_coords(in.coords, s);
    const CoordMap cmap = build_coord_map(in.coords);
    SparseTensor<T> out;
    out.coords = out_coords;
    out.stride = s;
    out.feats = FeatMat<T>(std::int64_t(out_coords.size()), c_out);
    for (std::size_t o = 0; o < out_coords.size(); ++o) {
        const Coord oc = out_coords[o];
        T* dst = out.feats.row(o);
        for (int dx = -K; dx <= K; ++dx)
            for (int dy = -K; dy <= K; ++dy)
                for (int dz = -K; dz <= K; ++dz) {
                    const Coord probe{oc.b, oc.x - dx * s, oc.y - dy * s, oc.z - dz * s};
                    if (floor_div(probe.x, 2 * s) * 2 * s != probe.x ||
                        floor_div(probe.y, 2 * s) * 2 * s != probe.y ||
                        floor_div(probe.z, 2 * s) * 2 * s != probe.z)
                        continue;
                    auto it = cmap.find(coord_key(probe));
                    if (it == cmap.end()) continue;
                    const int k = ((dx + K) * S + (dy + K)) * S + (dz + K);
                    const T* src = in.feats.row(it->second);
                    const T* wk = w.data.data() + std::int64_t(k) * c_in * c_out;
                    for (int ci = 0; ci < c_in; ++ci)
                        for (int co = 0; co < c_out; ++co)
                            dst[co] += src[ci] * wk[std::int64_t(ci) * c_out + co];
                }
    }
    return out;
}

template <typename T>
FeatMat<T> bn_train(const FeatMat<T>& in, const std::vector<T>& gamma, const std::vector<T>& beta,
                    T eps) {
    const std::int64_t n = in.rows, c = in.cols;
    FeatMat<T> out(n, c);
    for (std::int64_t j = 0; j < c; ++j) {
        T s = 0;
        for (std::int64_t r = 0; r < n; ++r) s += in.at(r, j);
        const T mean = s / T(n);
        T sq = 0;
        for (std::int64_t r = 0; r < n; ++r) {
            const T d = in.at(r, j) - mean;
            sq += d * d;
        }
        const T istd = T(1) / std::sqrt(sq / T(n) + eps);
        for (std::int64_t r = 0; r < n; ++r)
            out.at(r, j) = (in.at(r, j) - mean) * istd * gamma[j] + beta[j];
    }
    return out;
}

}  // namespace ref
}  // namespace gsdn
