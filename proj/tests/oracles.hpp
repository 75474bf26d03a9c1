#pragma once
// Independent reference implementations used only by tests: dense convolution
// on a padded box, scatter-style transposed convolution, exhaustive anchor
// matching, and stencil reachability. Deliberately written with different loop
// structure than the library kernels.

#include <array>
#include <cmath>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "gsdn/detect.hpp"
#include "gsdn/kernel_map.hpp"
#include "gsdn/rng.hpp"

namespace oracle {

using gsdn::Box3D;
using gsdn::Coord;
using gsdn::FeatMat;
using gsdn::SparseTensor;

// Dense volume over [0,extent)^3, batch 0 only, zero outside support.
template <typename T>
struct DenseVol {
    int extent = 0, channels = 0;
    std::vector<T> v;

    DenseVol(int e, int c) : extent(e), channels(c), v(std::size_t(e) * e * e * c, T(0)) {}

    T get(int x, int y, int z, int c) const {
        if (x < 0 || y < 0 || z < 0 || x >= extent || y >= extent || z >= extent) return T(0);
        return v[((std::size_t(x) * extent + y) * extent + z) * channels + c];
    }
    T& ref(int x, int y, int z, int c) {
        return v[((std::size_t(x) * extent + y) * extent + z) * channels + c];
    }
};

template <typename T>
DenseVol<T> to_dense(const SparseTensor<T>& t, int extent) {
    DenseVol<T> d(extent, int(t.feats.cols));
    for (std::size_t i = 0; i < t.coords.size(); ++i)
        for (int c = 0; c < d.channels; ++c)
            d.ref(t.coords[i].x, t.coords[i].y, t.coords[i].z, c) = t.feats.at(std::int64_t(i), c);
    return d;
}

// weights laid out [offset][c_in][c_out], offset dx-major; same layout the
// library uses, but consumed by plain quadruple loops here.
template <typename T>
std::vector<T> dense_conv_at(const DenseVol<T>& in, const FeatMat<T>& w, int kernel_size, int step,
                             const Coord& out) {
    const int K = kernel_size / 2, c_out = int(w.cols);
    std::vector<T> acc(std::size_t(c_out), T(0));
    int offset = 0;
    for (int dx = -K; dx <= K; ++dx)
        for (int dy = -K; dy <= K; ++dy)
            for (int dz = -K; dz <= K; ++dz, ++offset)
                for (int ci = 0; ci < in.channels; ++ci) {
                    const T x = in.get(out.x + dx * step, out.y + dy * step, out.z + dz * step, ci);
                    if (x == T(0)) continue;
                    for (int co = 0; co < c_out; ++co)
                        acc[std::size_t(co)] += x * w.at(std::int64_t(offset) * in.channels + ci, co);
                }
    return acc;
}

// Transposed conv by scattering: every input cell at stride 2s pushes into the
// 27 cells at distance delta*s. Returns map from coord key to feature row.
template <typename T>
std::unordered_map<std::uint64_t, std::vector<T>> dense_conv_transpose(const SparseTensor<T>& in,
                                                                       const FeatMat<T>& w,
                                                                       int out_stride) {
    const int c_in = int(in.feats.cols), c_out = int(w.cols);
    std::unordered_map<std::uint64_t, std::vector<T>> out;
    for (std::size_t i = 0; i < in.coords.size(); ++i) {
        int offset = 0;
        for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dz = -1; dz <= 1; ++dz, ++offset) {
                    const Coord o{in.coords[i].b, in.coords[i].x + dx * out_stride,
                                  in.coords[i].y + dy * out_stride,
                                  in.coords[i].z + dz * out_stride};
                    auto& row = out[gsdn::coord_key(o)];
                    if (row.empty()) row.assign(std::size_t(c_out), T(0));
                    for (int ci = 0; ci < c_in; ++ci)
                        for (int co = 0; co < c_out; ++co)
                            row[std::size_t(co)] += in.feats.at(std::int64_t(i), ci) *
                                                    w.at(std::int64_t(offset) * c_in + ci, co);
                }
    }
    return out;
}

// Random sparse tensor on the stride lattice inside [0, extent)^3.
template <typename T>
SparseTensor<T> random_tensor(gsdn::Rng& rng, int target_nnz, int extent, int channels,
                              int stride = 1) {
    std::vector<Coord> coords;
    const int cells = extent / stride;
    for (int i = 0; i < target_nnz * 2 && int(coords.size()) < target_nnz; ++i)
        coords.push_back({0, stride * int(rng.below(std::uint64_t(cells))),
                          stride * int(rng.below(std::uint64_t(cells))),
                          stride * int(rng.below(std::uint64_t(cells)))});
    std::sort(coords.begin(), coords.end());
    coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    SparseTensor<T> t;
    t.coords = std::move(coords);
    t.stride = stride;
    t.feats = FeatMat<T>(std::int64_t(t.coords.size()), channels);
    for (auto& v : t.feats.data) v = T(rng.gaussian());
    return t;
}

template <typename T>
FeatMat<T> random_weights(gsdn::Rng& rng, int volume, int c_in, int c_out) {
    FeatMat<T> w(std::int64_t(volume) * c_in, c_out);
    for (auto& v : w.data) v = T(rng.gaussian() * 0.3);
    return w;
}

// Exhaustive matcher over every (voxel, anchor, gt) triple.
struct BruteMatch {
    std::vector<std::array<int, 3>> pos;  // row, anchor, gt
    std::vector<std::array<int, 2>> neg;  // row, anchor
};

inline BruteMatch brute_match(const std::vector<Coord>& coords, int level,
                              const gsdn::AnchorConfig& cfg, const std::vector<Box3D>& gt) {
    BruteMatch out;
    const int k = int(cfg.ratios.size());
    for (int r = 0; r < int(coords.size()); ++r)
        for (int a = 0; a < k; ++a) {
            const Box3D box = gsdn::anchor_box(coords[std::size_t(r)], level, a, cfg);
            double best = -1.0;
            int best_g = -1;
            for (int g = 0; g < int(gt.size()); ++g) {
                const double v = gsdn::iou3d(box, gt[std::size_t(g)]);
                if (v > best) {
                    best = v;
                    best_g = g;
                }
            }
            if (best > gsdn::kIouPositive)
                out.pos.push_back({r, a, best_g});
            else if (best < gsdn::kIouNegative || gt.empty())
                out.neg.push_back({r, a});
        }
    return out;
}

// Reachability through the 27-stencil DAG, computed by scattering upward:
// every positive voxel at level l-1 marks the lattice-aligned parents it is
// reachable from at level l. (The library walks the other direction.)
inline std::vector<std::vector<char>> brute_sparsity(
    const std::vector<std::vector<Coord>>& supports,
    const std::vector<std::vector<char>>& anchor_pos) {
    const int L = int(supports.size());
    std::vector<std::vector<char>> masks(static_cast<std::size_t>(L));
    std::vector<Coord> finer_pos;
    for (int l = 1; l <= L; ++l) {
        const auto& coords = supports[std::size_t(l - 1)];
        std::unordered_set<std::uint64_t> on;
        for (int r = 0; r < int(coords.size()); ++r)
            if (anchor_pos[std::size_t(l - 1)][std::size_t(r)])
                on.insert(gsdn::coord_key(coords[std::size_t(r)]));
        const int step = 1 << (l - 1), lat = 1 << l;
        for (const Coord& u : finer_pos)
            for (int dx = -1; dx <= 1; ++dx)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dz = -1; dz <= 1; ++dz) {
                        const Coord p{u.b, u.x - dx * step, u.y - dy * step, u.z - dz * step};
                        if (p.x % lat == 0 && p.y % lat == 0 && p.z % lat == 0)
                            on.insert(gsdn::coord_key(p));
                    }
        auto& mask = masks[std::size_t(l - 1)];
        mask.assign(coords.size(), 0);
        finer_pos.clear();
        for (int r = 0; r < int(coords.size()); ++r)
            if (on.count(gsdn::coord_key(coords[std::size_t(r)]))) {
                mask[std::size_t(r)] = 1;
                finer_pos.push_back(coords[std::size_t(r)]);
            }
        finer_pos.shrink_to_fit();
    }
    return masks;
}

}  // namespace oracle
