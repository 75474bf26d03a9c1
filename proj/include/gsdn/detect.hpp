#pragma once
// Detection geometry: anchors, box coding, IoU, target assignment, NMS.
// Box math runs in double; features stay in the network's scalar type.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <unordered_set>
#include <vector>

#include "gsdn/common.hpp"
#include "gsdn/lattice.hpp"

namespace gsdn {

struct Box3D {
    std::array<double, 3> center{0, 0, 0};
    std::array<double, 3> size{1, 1, 1};
    int class_id = -1;
    double score = 1.0;
};

// 13 volume-normalized aspect-ratio multipliers: identity plus the unique
// permutations of [sqrt(a), sqrt(a), 1/sqrt(a)] for a in {2,4,1/2,1/4},
// rescaled so each triple has unit product (the aspect ratio between the wide
// and thin axes stays a).
inline std::vector<std::array<double, 3>> anchor_ratios() {
    std::vector<std::array<double, 3>> out;
    out.push_back({1.0, 1.0, 1.0});
    for (double a : {2.0, 4.0, 0.5, 0.25}) {
        const double s = std::cbrt(a);            // sqrt(a) / a^(1/6)
        const double t = 1.0 / (s * s);           // (1/sqrt(a)) / a^(1/6)
        out.push_back({s, s, t});
        out.push_back({s, t, s});
        out.push_back({t, s, s});
    }
    return out;
}

// Ratio subsets for the ablation grid: seeds {1}, {1,4,1/4}, or all five.
inline std::vector<std::array<double, 3>> anchor_ratios_subset(const std::vector<double>& seeds) {
    std::vector<std::array<double, 3>> out;
    for (double a : seeds) {
        if (a == 1.0) {
            out.push_back({1.0, 1.0, 1.0});
            continue;
        }
        const double s = std::cbrt(a);
        const double t = 1.0 / (s * s);
        out.push_back({s, s, t});
        out.push_back({s, t, s});
        out.push_back({t, s, s});
    }
    return out;
}

struct AnchorConfig {
    double voxel_size = 0.05;
    double anchor_scale = 4.0;
    std::vector<std::array<double, 3>> ratios = anchor_ratios();
};

// Anchor attached to a voxel at decoder level l (stride 2^l): centered on the
// voxel cell, base edge voxel_size * 2^l * anchor_scale, scaled per ratio.
inline Box3D anchor_box(const Coord& c, int level, int ratio_idx, const AnchorConfig& cfg) {
    const double stride = double(1 << level);
    const double base = cfg.voxel_size * stride * cfg.anchor_scale;
    Box3D b;
    b.center = {cfg.voxel_size * (c.x + stride / 2), cfg.voxel_size * (c.y + stride / 2),
                cfg.voxel_size * (c.z + stride / 2)};
    const auto& r = cfg.ratios[ratio_idx];
    b.size = {base * r[0], base * r[1], base * r[2]};
    return b;
}

inline double iou3d(const Box3D& a, const Box3D& b) {
    double inter = 1.0, va = 1.0, vb = 1.0;
    for (int d = 0; d < 3; ++d) {
        const double lo = std::max(a.center[d] - a.size[d] / 2, b.center[d] - b.size[d] / 2);
        const double hi = std::min(a.center[d] + a.size[d] / 2, b.center[d] + b.size[d] / 2);
        inter *= std::max(0.0, hi - lo);
        va *= a.size[d];
        vb *= b.size[d];
    }
    const double uni = va + vb - inter;
    return uni <= 0 ? 0.0 : inter / uni;
}

// t = ((gt.c - a.c)/a.size, ln(gt.size/a.size))
inline std::array<double, 6> encode_box(const Box3D& gt, const Box3D& anchor) {
    std::array<double, 6> t;
    for (int d = 0; d < 3; ++d) {
        t[d] = (gt.center[d] - anchor.center[d]) / anchor.size[d];
        t[d + 3] = std::log(gt.size[d] / anchor.size[d]);
    }
    return t;
}

inline Box3D decode_box(const std::array<double, 6>& t, const Box3D& anchor) {
    Box3D b;
    for (int d = 0; d < 3; ++d) {
        b.center[d] = anchor.center[d] + t[d] * anchor.size[d];
        b.size[d] = anchor.size[d] * std::exp(t[d + 3]);
    }
    return b;
}

constexpr double kIouPositive = 0.35;
constexpr double kIouNegative = 0.2;

// The anchor set quantizes boxes: lattice centers sit one grid step apart
// (1/anchor_scale in anchor units) and the ratio ladder steps per-axis size
// by 2^(1/3). The best-matching anchor is therefore within one grid step of
// any center and half a ladder step of any size; slots regressing past that
// envelope are reporting untrained extrapolation, so decode clamps there and
// the stray boxes stay inside the duplicate cluster where NMS absorbs them.
constexpr double kRatioStepLog = 0.23104906018664842;  // log(2)/3
constexpr double kMaxLogSizeOff = kRatioStepLog / 2.0;
inline double max_center_off(const AnchorConfig& cfg) { return 1.0 / cfg.anchor_scale; }

struct AnchorMatch {
    int row, anchor, gt;
};
struct AnchorRef {
    int row, anchor;
};

struct LevelMatch {
    std::vector<AnchorMatch> pos;  // IoU > 0.35, argmax gt (ties: lowest index)
    std::vector<AnchorRef> neg;    // max IoU < 0.2
    std::vector<char> voxel_positive;  // per row: hosts at least one positive anchor
};

// Per-anchor labels against ground truth; anchors in the 0.2..0.35 band are
// ignored (neither list).
inline LevelMatch match_anchors(const std::vector<Coord>& coords, int level,
                                const AnchorConfig& cfg, const std::vector<Box3D>& gt) {
    LevelMatch m;
    m.voxel_positive.assign(coords.size(), 0);
    const int ka = int(cfg.ratios.size());
    for (int r = 0; r < int(coords.size()); ++r) {
        for (int a = 0; a < ka; ++a) {
            const Box3D ab = anchor_box(coords[r], level, a, cfg);
            double best = 0.0;
            int best_gt = -1;
            for (int g = 0; g < int(gt.size()); ++g) {
                const double v = iou3d(ab, gt[g]);
                if (v > best) {
                    best = v;
                    best_gt = g;
                }
            }
            if (best > kIouPositive) {
                m.pos.push_back({r, a, best_gt});
                m.voxel_positive[r] = 1;
            } else if (best < kIouNegative) {
                m.neg.push_back({r, a});
            }
        }
    }
    return m;
}

// Sparsity-positive masks per level. supports[l-1] is the realized (pre-prune)
// support of decoder level l; anchor_pos[l-1] marks voxels hosting positive
// anchors. A voxel is sparsity-positive if its own anchors are positive or its
// 27-stencil expansion reaches a positive voxel at the next finer level.
inline std::vector<std::vector<char>> sparsity_targets(
    const std::vector<std::vector<Coord>>& supports,
    const std::vector<std::vector<char>>& anchor_pos) {
    const int L = int(supports.size());
    std::vector<std::vector<char>> masks(L);
    std::unordered_set<std::uint64_t> finer;  // S_{l-1} coords
    for (int l = 1; l <= L; ++l) {
        const auto& coords = supports[l - 1];
        auto& mask = masks[l - 1];
        mask.assign(coords.size(), 0);
        const int s = 1 << (l - 1);
        for (int i = 0; i < int(coords.size()); ++i) {
            if (anchor_pos[l - 1][i]) {
                mask[i] = 1;
                continue;
            }
            if (l == 1) continue;
            const Coord& v = coords[i];
            for (int dx = -1; dx <= 1 && !mask[i]; ++dx)
                for (int dy = -1; dy <= 1 && !mask[i]; ++dy)
                    for (int dz = -1; dz <= 1 && !mask[i]; ++dz)
                        if (finer.count(coord_key(
                                {v.b, v.x + dx * s, v.y + dy * s, v.z + dz * s})))
                            mask[i] = 1;
        }
        finer.clear();
        for (int i = 0; i < int(coords.size()); ++i)
            if (mask[i]) finer.insert(coord_key(coords[i]));
    }
    return masks;
}

// Teacher-forcing keep sets computed from ground truth alone: lattice voxels
// whose anchors would be positive at each level, closed upward through the
// stencil so every realizable positive's ancestor chain is kept. Superset of
// any realized sparsity target. Index [l-1] = level l, keys via coord_key.
inline std::vector<std::unordered_set<std::uint64_t>> forced_sets(const std::vector<Box3D>& gt,
                                                                  int levels,
                                                                  const AnchorConfig& cfg) {
    std::vector<std::unordered_set<std::uint64_t>> forced(levels);
    for (int l = 1; l <= levels; ++l) {
        const int s = 1 << l;
        double amax = 0.0;
        for (const auto& r : cfg.ratios)
            amax = std::max({amax, r[0], r[1], r[2]});
        const double base = cfg.voxel_size * s * cfg.anchor_scale;
        for (const Box3D& g : gt) {
            int lo[3], hi[3];
            for (int d = 0; d < 3; ++d) {
                const double reach = (g.size[d] + base * amax) / 2;
                // center = voxel_size*(v + s/2) must fall within reach of gt center
                lo[d] = int(std::floor(((g.center[d] - reach) / cfg.voxel_size - s / 2.0) / s)) * s;
                hi[d] = int(std::ceil(((g.center[d] + reach) / cfg.voxel_size - s / 2.0) / s)) * s;
            }
            for (int x = lo[0]; x <= hi[0]; x += s)
                for (int y = lo[1]; y <= hi[1]; y += s)
                    for (int z = lo[2]; z <= hi[2]; z += s) {
                        const Coord v{0, x, y, z};
                        for (int a = 0; a < int(cfg.ratios.size()); ++a) {
                            if (iou3d(anchor_box(v, l, a, cfg), g) > kIouPositive) {
                                forced[l - 1].insert(coord_key(v));
                                break;
                            }
                        }
                    }
        }
        if (l >= 2) {
            // Parents of forced voxels one level down, restricted to the 2^l lattice.
            const int cs = 1 << (l - 1);
            for (std::uint64_t key : forced[l - 2]) {
                const Coord u = coord_unkey(key);
                for (int dx = -1; dx <= 1; ++dx)
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dz = -1; dz <= 1; ++dz) {
                            const Coord p{u.b, u.x - dx * cs, u.y - dy * cs, u.z - dz * cs};
                            if (p.x % s == 0 && p.y % s == 0 && p.z % s == 0)
                                forced[l - 1].insert(coord_key(p));
                        }
            }
        }
    }
    return forced;
}

inline double clamp_prob(double p) { return std::clamp(p, 1e-7, 1.0 - 1e-7); }

// -(1/2|P|) sum log p - (1/2|N|) sum log(1-p); empty side contributes 0.
inline double balanced_ce(const std::vector<double>& probs, const std::vector<int>& labels) {
    if (probs.size() != labels.size() || probs.empty())
        throw ContractError("balanced_ce: empty or mismatched inputs");
    double sp = 0, sn = 0;
    std::int64_t np = 0, nn = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = clamp_prob(probs[i]);
        if (labels[i]) {
            sp += std::log(p);
            ++np;
        } else {
            sn += std::log(1.0 - p);
            ++nn;
        }
    }
    double loss = 0;
    if (np) loss += -sp / (2.0 * double(np));
    if (nn) loss += -sn / (2.0 * double(nn));
    return loss;
}

// Plain-mean cross entropy over the pooled set (ablation counterpart).
inline double unbalanced_ce(const std::vector<double>& probs, const std::vector<int>& labels) {
    if (probs.size() != labels.size() || probs.empty())
        throw ContractError("unbalanced_ce: empty or mismatched inputs");
    double s = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = clamp_prob(probs[i]);
        s += labels[i] ? -std::log(p) : -std::log(1.0 - p);
    }
    return s / double(probs.size());
}

inline double huber(double r, double delta = 1.0) {
    const double a = std::abs(r);
    return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

inline double huber_grad(double r, double delta = 1.0) {
    return r > delta ? delta : (r < -delta ? -delta : r);
}

// Greedy per-class NMS; suppressed boxes fold into the keeper as a
// score-weighted average of center and size. The keeper's score is the
// cluster's accumulated score mass: a real object is covered by many anchor
// slots voting for nearly the same box, while a stray high-scoring slot
// (e.g. one whose anchor shape matches no nearby object) collects almost no
// support, so ranking by mass puts objects above strays even when the
// per-slot sigmoids saturate and tie.
inline std::vector<Box3D> nms_merge(std::vector<Box3D> boxes, double iou_thresh = 0.2,
                                    double score_thresh = 0.0) {
    std::erase_if(boxes, [&](const Box3D& b) { return b.score < score_thresh; });
    auto order = [](const Box3D& a, const Box3D& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.center != b.center) return a.center < b.center;
        return a.size < b.size;
    };
    std::vector<Box3D> out;
    std::vector<int> classes;
    for (const Box3D& b : boxes)
        if (std::find(classes.begin(), classes.end(), b.class_id) == classes.end())
            classes.push_back(b.class_id);
    std::sort(classes.begin(), classes.end());
    for (int cls : classes) {
        std::vector<Box3D> pool;
        for (const Box3D& b : boxes)
            if (b.class_id == cls) pool.push_back(b);
        std::sort(pool.begin(), pool.end(), order);
        std::vector<char> dead(pool.size(), 0);
        for (std::size_t i = 0; i < pool.size(); ++i) {
            if (dead[i]) continue;
            Box3D keep = pool[i];
            double wsum = keep.score;
            std::array<double, 3> c = keep.center, s = keep.size;
            for (int d = 0; d < 3; ++d) {
                c[d] *= keep.score;
                s[d] *= keep.score;
            }
            for (std::size_t j = i + 1; j < pool.size(); ++j) {
                if (dead[j]) continue;
                if (iou3d(pool[i], pool[j]) > iou_thresh) {
                    dead[j] = 1;
                    wsum += pool[j].score;
                    for (int d = 0; d < 3; ++d) {
                        c[d] += pool[j].score * pool[j].center[d];
                        s[d] += pool[j].score * pool[j].size[d];
                    }
                }
            }
            for (int d = 0; d < 3; ++d) {
                keep.center[d] = c[d] / wsum;
                keep.size[d] = s[d] / wsum;
            }
            keep.score = wsum;
            out.push_back(keep);
        }
    }
    std::sort(out.begin(), out.end(), [](const Box3D& a, const Box3D& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.center < b.center;
    });
    return out;
}

}  // namespace gsdn
