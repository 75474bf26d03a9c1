#pragma once
#include <algorithm>
#include <utility>
#include <vector>

#include "gsdn/lattice.hpp"

namespace gsdn {

// Gather/scatter index pairs realizing a sparse convolution. Entries are kept
// in two groupings: by output row (forward) and by input row (backward), both
// in deterministic order so float accumulation is reproducible for any thread
// count. Offset index k enumerates dx-major: k = ((dx+K)*S + (dy+K))*S + (dz+K).
struct KernelMap {
    int n_in = 0, n_out = 0;
    int kernel_size = 1;  // 2K+1
    std::vector<int> out_begin;                // n_out+1
    std::vector<std::pair<int, int>> by_out;   // (offset k, in_row), grouped by out row
    std::vector<int> in_begin;                 // n_in+1
    std::vector<std::pair<int, int>> by_in;    // (offset k, out_row), grouped by in row

    int volume() const { return kernel_size * kernel_size * kernel_size; }
    size_t entries() const { return by_out.size(); }
    std::int64_t bytes() const { return std::int64_t((by_out.size() + by_in.size()) * sizeof(std::pair<int, int>)); }
};

namespace detail {

inline void fill_by_in(KernelMap& m) {
    std::vector<int> counts(m.n_in + 1, 0);
    for (int o = 0; o < m.n_out; ++o)
        for (int e = m.out_begin[o]; e < m.out_begin[o + 1]; ++e) counts[m.by_out[e].second + 1]++;
    for (int i = 0; i < m.n_in; ++i) counts[i + 1] += counts[i];
    m.in_begin = counts;
    m.by_in.resize(m.by_out.size());
    std::vector<int> cursor(m.in_begin.begin(), m.in_begin.end() - 1);
    for (int o = 0; o < m.n_out; ++o)
        for (int e = m.out_begin[o]; e < m.out_begin[o + 1]; ++e) {
            const auto [k, in_row] = m.by_out[e];
            m.by_in[cursor[in_row]++] = {k, o};
        }
}

// Common gather builder: for each output coord, probe in_map at
// out + delta*step for every kernel offset. `lattice` restricts candidate
// input coords to multiples of it (used by the transposed map).
inline KernelMap gather_map(const std::vector<Coord>& out_coords, const CoordMap& in_map, int n_in, int kernel_size,
                            int step, int lattice) {
    const int K = (kernel_size - 1) / 2;
    KernelMap m;
    m.n_in = n_in;
    m.n_out = int(out_coords.size());
    m.kernel_size = kernel_size;
    m.out_begin.assign(m.n_out + 1, 0);

    const int n_out = m.n_out;
    std::vector<std::vector<std::pair<int, int>>> rows(n_out);
#pragma omp parallel for schedule(static) if (n_out > 256)
    for (int o = 0; o < n_out; ++o) {
        const Coord& c = out_coords[o];
        auto& row = rows[o];
        int k = 0;
        for (int dx = -K; dx <= K; ++dx)
            for (int dy = -K; dy <= K; ++dy)
                for (int dz = -K; dz <= K; ++dz, ++k) {
                    Coord probe{c.b, c.x + dx * step, c.y + dy * step, c.z + dz * step};
                    if (lattice > 1 && (probe.x % lattice || probe.y % lattice || probe.z % lattice)) continue;
                    auto it = in_map.find(coord_key(probe));
                    if (it != in_map.end()) row.emplace_back(k, it->second);
                }
    }
    for (int o = 0; o < n_out; ++o) m.out_begin[o + 1] = m.out_begin[o] + int(rows[o].size());
    m.by_out.resize(m.out_begin[n_out]);
#pragma omp parallel for schedule(static) if (n_out > 256)
    for (int o = 0; o < n_out; ++o) std::copy(rows[o].begin(), rows[o].end(), m.by_out.begin() + m.out_begin[o]);
    fill_by_in(m);
    return m;
}

}  // namespace detail

// Submanifold convolution: output support == input support, in = out + delta*stride.
inline KernelMap kernel_map_submanifold(const std::vector<Coord>& coords, int stride, int kernel_size) {
    const CoordMap in_map = build_coord_map(coords);
    return detail::gather_map(coords, in_map, int(coords.size()), kernel_size, stride, 1);
}

// Strided (factor-2) convolution: output coords are the input coords snapped
// down to the 2*stride lattice, deduplicated; gathers at out + delta*stride.
inline std::vector<Coord> strided_out_coords(const std::vector<Coord>& coords, int stride) {
    std::vector<Coord> out;
    out.reserve(coords.size());
    const int s2 = 2 * stride;
    for (const Coord& c : coords)
        out.push_back({c.b, floor_div(c.x, s2) * s2, floor_div(c.y, s2) * s2, floor_div(c.z, s2) * s2});
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

inline KernelMap kernel_map_strided(const std::vector<Coord>& in_coords, const std::vector<Coord>& out_coords,
                                    int stride, int kernel_size) {
    const CoordMap in_map = build_coord_map(in_coords);
    return detail::gather_map(out_coords, in_map, int(in_coords.size()), kernel_size, stride, 1);
}

// Generative transposed convolution: input stride 2s, output stride s, output
// support is the full {-1,0,1}^3 * s stencil of the input support. For output
// y, contributing inputs are y - delta*s restricted to the 2s lattice; the
// weight offset is delta = (y - c)/s.
inline std::vector<Coord> transposed_out_coords(const std::vector<Coord>& in_coords, int out_stride) {
    std::vector<Coord> out;
    out.reserve(in_coords.size() * 27);
    for (const Coord& c : in_coords)
        for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dz = -1; dz <= 1; ++dz)
                    out.push_back({c.b, c.x + dx * out_stride, c.y + dy * out_stride, c.z + dz * out_stride});
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

inline KernelMap kernel_map_transposed(const std::vector<Coord>& in_coords, const std::vector<Coord>& out_coords,
                                       int out_stride) {
    const CoordMap in_map = build_coord_map(in_coords);
    return detail::gather_map(out_coords, in_map, int(in_coords.size()), 3, -out_stride, 2 * out_stride);
}

}  // namespace gsdn
