#pragma once
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "gsdn/common.hpp"

namespace gsdn {

// Lattice coordinate: batch index plus integer voxel position.
// World position of (x,y,z) is voxel_size * (x,y,z).
struct Coord {
    std::int32_t b = 0, x = 0, y = 0, z = 0;

    bool operator==(const Coord& o) const = default;
    bool operator<(const Coord& o) const {
        if (b != o.b) return b < o.b;
        if (x != o.x) return x < o.x;
        if (y != o.y) return y < o.y;
        return z < o.z;
    }
};

// Packs each component into 16 bits; components must stay in [-32768, 32767].
inline std::uint64_t coord_key(const Coord& c) {
    return (std::uint64_t(std::uint16_t(c.b)) << 48) | (std::uint64_t(std::uint16_t(c.x)) << 32) |
           (std::uint64_t(std::uint16_t(c.y)) << 16) | std::uint64_t(std::uint16_t(c.z));
}

inline Coord coord_unkey(std::uint64_t key) {
    return {std::int32_t(std::int16_t(key >> 48)), std::int32_t(std::int16_t(key >> 32)),
            std::int32_t(std::int16_t(key >> 16)), std::int32_t(std::int16_t(key))};
}

inline void check_coord_range(const Coord& c) {
    auto in16 = [](std::int32_t v) { return v >= -32768 && v <= 32767; };
    if (!in16(c.b) || !in16(c.x) || !in16(c.y) || !in16(c.z))
        throw ContractError("coordinate out of 16-bit lattice range: (" + std::to_string(c.b) + "," +
                            std::to_string(c.x) + "," + std::to_string(c.y) + "," + std::to_string(c.z) + ")");
}

using CoordMap = std::unordered_map<std::uint64_t, int>;

inline CoordMap build_coord_map(const std::vector<Coord>& coords) {
    CoordMap map;
    map.reserve(coords.size() * 2);
    for (int i = 0; i < int(coords.size()); ++i) map.emplace(coord_key(coords[i]), i);
    return map;
}

// floor division, exact for negative numerators
inline std::int32_t floor_div(std::int32_t a, std::int32_t b) {
    std::int32_t q = a / b, r = a % b;
    return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}

// Sparse tensor: unique lattice coordinates in lexicographic (b,x,y,z) order,
// one feature row per coordinate, and the lattice stride.
template <typename T>
struct SparseTensor {
    std::vector<Coord> coords;
    FeatMat<T> feats;
    int stride = 1;

    SparseTensor() = default;
    SparseTensor(std::vector<Coord> c, FeatMat<T> f, int s) : coords(std::move(c)), feats(std::move(f)), stride(s) {}

    int nnz() const { return int(coords.size()); }
    int channels() const { return int(feats.cols); }
    bool empty() const { return coords.empty(); }
};

using SparseTensorF = SparseTensor<float>;
using SparseTensorD = SparseTensor<double>;

template <typename T>
void check_lattice(const SparseTensor<T>& t) {
    if (t.nnz() != t.feats.rows) throw ContractError("coords/feats row mismatch");
    for (int i = 0; i < t.nnz(); ++i) {
        const Coord& c = t.coords[i];
        if (c.x % t.stride || c.y % t.stride || c.z % t.stride)
            throw ContractError("coordinate off the stride-" + std::to_string(t.stride) + " lattice");
        if (i > 0 && !(t.coords[i - 1] < c)) throw ContractError("coords not strictly lexicographic");
    }
}

struct QuantizationResult {
    SparseTensorF tensor;
    std::vector<int> point_to_voxel;  // per input point, row index into tensor.coords
};

// Voxelize points (meters) at voxel_size; per-voxel feature is the mean of the
// features of the points that fall in the cell. Coordinates come out in
// lexicographic order, stride 1.
inline QuantizationResult quantize(const std::vector<std::array<double, 3>>& points, const FeatMat<float>& features,
                                   double voxel_size, const std::vector<int>* batch_ids = nullptr) {
    if (points.empty()) throw ContractError("quantize: empty point set");
    if (voxel_size <= 0) throw ContractError("quantize: voxel_size must be positive");
    if (features.rows != std::int64_t(points.size())) throw ContractError("quantize: feature row count != point count");

    const int n = int(points.size());
    std::vector<Coord> cell(n);
    for (int i = 0; i < n; ++i) {
        for (int a = 0; a < 3; ++a)
            if (!std::isfinite(points[i][a]))
                throw DataError("quantize: non-finite point at row " + std::to_string(i));
        for (int j = 0; j < features.cols; ++j)
            if (!std::isfinite(features.at(i, j)))
                throw DataError("quantize: non-finite feature at row " + std::to_string(i));
        Coord c;
        c.b = batch_ids ? (*batch_ids)[i] : 0;
        c.x = std::int32_t(std::floor(points[i][0] / voxel_size));
        c.y = std::int32_t(std::floor(points[i][1] / voxel_size));
        c.z = std::int32_t(std::floor(points[i][2] / voxel_size));
        check_coord_range(c);
        cell[i] = c;
    }

    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (!(cell[a] == cell[b])) return cell[a] < cell[b];
        return a < b;
    });

    std::vector<Coord> coords;
    coords.reserve(n);
    std::vector<int> point_to_voxel(n);
    std::vector<int> counts;
    FeatMat<float> sums;
    {
        std::vector<std::vector<float>> rows;
        int i = 0;
        while (i < n) {
            int j = i;
            const Coord& c = cell[order[i]];
            std::vector<float> sum(features.cols, 0.f);
            int cnt = 0;
            while (j < n && cell[order[j]] == c) {
                for (int ch = 0; ch < features.cols; ++ch) sum[ch] += features.at(order[j], ch);
                point_to_voxel[order[j]] = int(coords.size());
                ++cnt;
                ++j;
            }
            coords.push_back(c);
            counts.push_back(cnt);
            rows.push_back(std::move(sum));
            i = j;
        }
        sums = FeatMat<float>(int(coords.size()), features.cols);
        for (int r = 0; r < int(coords.size()); ++r)
            for (int ch = 0; ch < features.cols; ++ch) sums.at(r, ch) = rows[r][ch] / float(counts[r]);
    }

    QuantizationResult out;
    out.tensor = SparseTensorF(std::move(coords), std::move(sums), 1);
    out.point_to_voxel = std::move(point_to_voxel);
    return out;
}

// Support union; features summed on the intersection. Output lexicographic.
// Returns per-input row maps (row in a/b -> row in result) for gradient routing.
template <typename T>
SparseTensor<T> tensor_add(const SparseTensor<T>& a, const SparseTensor<T>& b, std::vector<int>* a_rows = nullptr,
                           std::vector<int>* b_rows = nullptr) {
    if (a.stride != b.stride) throw ContractError("tensor_add: stride mismatch");
    if (a.channels() != b.channels() && !a.empty() && !b.empty())
        throw ContractError("tensor_add: channel mismatch");

    std::vector<Coord> coords;
    coords.reserve(a.nnz() + b.nnz());
    std::vector<int> amap(a.nnz()), bmap(b.nnz());
    int i = 0, j = 0;
    while (i < a.nnz() || j < b.nnz()) {
        if (j >= b.nnz() || (i < a.nnz() && a.coords[i] < b.coords[j])) {
            amap[i++] = int(coords.size());
            coords.push_back(a.coords[i - 1]);
        } else if (i >= a.nnz() || b.coords[j] < a.coords[i]) {
            bmap[j++] = int(coords.size());
            coords.push_back(b.coords[j - 1]);
        } else {
            amap[i++] = int(coords.size());
            bmap[j++] = int(coords.size());
            coords.push_back(a.coords[i - 1]);
        }
    }
    const int ch = a.empty() ? b.channels() : a.channels();
    FeatMat<T> feats(int(coords.size()), ch);
    for (int r = 0; r < a.nnz(); ++r)
        for (int c = 0; c < ch; ++c) feats.at(amap[r], c) += a.feats.at(r, c);
    for (int r = 0; r < b.nnz(); ++r)
        for (int c = 0; c < ch; ++c) feats.at(bmap[r], c) += b.feats.at(r, c);

    if (a_rows) *a_rows = std::move(amap);
    if (b_rows) *b_rows = std::move(bmap);
    return SparseTensor<T>(std::move(coords), std::move(feats), a.stride);
}

// Dense 4-D bridge for test oracles: dense[c][(x-ox)/s][(y-oy)/s][(z-oz)/s].
// Single batch only; every coordinate must fall inside the window.
template <typename T>
std::vector<T> densify(const SparseTensor<T>& t, const Coord& origin, std::array<int, 3> extent) {
    const int s = t.stride;
    const int ch = t.channels();
    std::vector<T> dense(size_t(ch) * extent[0] * extent[1] * extent[2], T(0));
    for (int i = 0; i < t.nnz(); ++i) {
        const Coord& c = t.coords[i];
        const int ix = (c.x - origin.x) / s, iy = (c.y - origin.y) / s, iz = (c.z - origin.z) / s;
        if (c.b != origin.b || ix < 0 || ix >= extent[0] || iy < 0 || iy >= extent[1] || iz < 0 || iz >= extent[2] ||
            (c.x - origin.x) % s || (c.y - origin.y) % s || (c.z - origin.z) % s)
            throw ContractError("densify: coordinate (" + std::to_string(c.x) + "," + std::to_string(c.y) + "," +
                                std::to_string(c.z) + ") outside window");
        for (int k = 0; k < ch; ++k)
            dense[((size_t(k) * extent[0] + ix) * extent[1] + iy) * extent[2] + iz] = t.feats.at(i, k);
    }
    return dense;
}

// Inverse of densify: keeps cells whose feature column is not all-zero.
template <typename T>
SparseTensor<T> sparsify(const std::vector<T>& dense, int channels, const Coord& origin, std::array<int, 3> extent,
                         int stride) {
    std::vector<Coord> coords;
    std::vector<std::vector<T>> rows;
    for (int ix = 0; ix < extent[0]; ++ix)
        for (int iy = 0; iy < extent[1]; ++iy)
            for (int iz = 0; iz < extent[2]; ++iz) {
                std::vector<T> row(channels);
                bool any = false;
                for (int k = 0; k < channels; ++k) {
                    row[k] = dense[((size_t(k) * extent[0] + ix) * extent[1] + iy) * extent[2] + iz];
                    any = any || row[k] != T(0);
                }
                if (!any) continue;
                coords.push_back({origin.b, origin.x + ix * stride, origin.y + iy * stride, origin.z + iz * stride});
                rows.push_back(std::move(row));
            }
    FeatMat<T> feats(int(coords.size()), channels);
    for (int r = 0; r < int(coords.size()); ++r)
        for (int k = 0; k < channels; ++k) feats.at(r, k) = rows[r][k];
    return SparseTensor<T>(std::move(coords), std::move(feats), stride);
}

}  // namespace gsdn
