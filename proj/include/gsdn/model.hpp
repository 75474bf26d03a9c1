#pragma once
// The network: hierarchical sparse encoder, generative decoder with sparsity
// pruning, per-level prediction heads, and the training loss.

#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "gsdn/autograd.hpp"
#include "gsdn/detect.hpp"
#include "gsdn/lattice.hpp"

namespace gsdn {

struct ModelConfig {
    int levels = 4;
    int in_channels = 1;
    int base_channels = 32;
    std::string backbone = "res14";  // res14 | res18 | res34
    int classes = 5;
    double tau = 0.3;
    double voxel_size = 0.05;
    double anchor_scale = 4.0;
    std::vector<double> ratio_seeds = {1.0, 2.0, 4.0, 0.5, 0.25};

    std::vector<int> blocks() const {
        std::vector<int> b(levels, 1);
        if (backbone == "res14") {
        } else if (backbone == "res18") {
            std::fill(b.begin(), b.end(), 2);
        } else if (backbone == "res34") {
            const int pat[4] = {3, 4, 6, 3};
            for (int i = 0; i < levels; ++i) b[i] = pat[std::min(i, 3)];
        } else {
            throw ConfigError("unknown backbone: " + backbone);
        }
        return b;
    }
    int channels_at(int level) const { return base_channels << (level - 1); }
    AnchorConfig anchor_config() const {
        AnchorConfig a;
        a.voxel_size = voxel_size;
        a.anchor_scale = anchor_scale;
        a.ratios = anchor_ratios_subset(ratio_seeds);
        return a;
    }
    int anchors() const { return int(anchor_config().ratios.size()); }
    int head_width() const { return (classes + 7) * anchors(); }
    void validate() const {
        if (levels < 2) throw ConfigError("levels must be >= 2");
        if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
        if (classes < 1) throw ConfigError("classes must be >= 1");
        if (tau < 0.0 || tau > 1.0) throw ConfigError("tau must be in [0, 1]");
        if (voxel_size <= 0.0) throw ConfigError("voxel_size must be > 0");
        blocks();
    }
};

constexpr double kHeadPrior = 0.01;  // pi for the -log((1-pi)/pi) bias init

// Creates and initializes every parameter and running-stat buffer. Creation
// order is fixed, so a given seed always produces the same weights.
template <typename T>
void build_params(ParameterStore<T>& store, const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    auto conv = [&](const std::string& name, int ks, int cin, int cout) {
        auto& p = store.add(name, {ks * ks * ks, cin, cout});
        init_conv(p, ks * ks * ks * cin, rng);
    };
    auto bn = [&](const std::string& name, int ch) {
        init_const(store.add(name + ".gamma", {ch}), T(1));
        init_const(store.add(name + ".beta", {ch}), T(0));
        store.add_buffer(name + ".run_mean", ch, T(0));
        store.add_buffer(name + ".run_var", ch, T(1));
    };
    const auto blocks = cfg.blocks();
    for (int l = 1; l <= cfg.levels; ++l) {
        const int cin = l == 1 ? cfg.in_channels : cfg.channels_at(l - 1);
        const int c = cfg.channels_at(l);
        const std::string pre = "enc" + std::to_string(l);
        conv(pre + ".down.w", 3, cin, c);
        bn(pre + ".down.bn", c);
        for (int b = 0; b < blocks[l - 1]; ++b) {
            const std::string bp = pre + ".block" + std::to_string(b);
            conv(bp + ".conv1.w", 3, c, c);
            bn(bp + ".bn1", c);
            conv(bp + ".conv2.w", 3, c, c);
            bn(bp + ".bn2", c);
        }
    }
    const T prior_bias = T(-std::log((1.0 - kHeadPrior) / kHeadPrior));
    for (int l = cfg.levels; l >= 1; --l) {
        const int c = cfg.channels_at(l);
        const std::string pre = "head" + std::to_string(l);
        conv(pre + ".anchor.w", 1, c, cfg.head_width());
        auto& ab = store.add(pre + ".anchor.b", {cfg.head_width()});
        init_const(ab, T(0));
        // objectness slot of each anchor gets the prior bias
        for (int a = 0; a < cfg.anchors(); ++a) ab.w.data[a * (cfg.classes + 7)] = prior_bias;
        conv(pre + ".sparsity.w", 1, c, 1);
        init_const(store.add(pre + ".sparsity.b", {1}), prior_bias);
        if (l > 1) {
            conv("dec" + std::to_string(l) + ".tr.w", 3, c, cfg.channels_at(l - 1));
            bn("dec" + std::to_string(l) + ".tr.bn", cfg.channels_at(l - 1));
        }
    }
}

enum class PruneMode { threshold, train_union, forced_only };

struct LevelOutput {
    std::vector<Coord> coords;       // pre-prune support, stride 2^level
    int feat = -1;                   // tape id, pre-prune features
    int anchor = -1;                 // tape id, nnz x (classes+7)*k
    int sparsity_logit = -1;         // tape id, nnz x 1
    std::vector<double> sparsity_prob;
    std::vector<char> kept;
};

struct ModelOutput {
    std::vector<std::vector<Coord>> enc_coords;  // index l-1 = level l
    std::vector<int> enc_feat;                   // tape ids
    std::vector<LevelOutput> levels;             // index l-1 = level l
};

namespace detail {

template <typename T>
int res_block(Tape<T>& t, ParameterStore<T>& store, const std::string& pre, int x, int map_idx,
              bool train) {
    const T eps = T(1e-5), mom = T(0.1);
    int h = op_conv(t, x, &store.at(pre + ".conv1.w"), map_idx);
    h = op_bn(t, h, &store.at(pre + ".bn1.gamma"), &store.at(pre + ".bn1.beta"),
              &store.buffer(pre + ".bn1.run_mean"), &store.buffer(pre + ".bn1.run_var"), eps, mom,
              train);
    h = op_relu(t, h);
    h = op_conv(t, h, &store.at(pre + ".conv2.w"), map_idx);
    h = op_bn(t, h, &store.at(pre + ".bn2.gamma"), &store.at(pre + ".bn2.beta"),
              &store.buffer(pre + ".bn2.run_mean"), &store.buffer(pre + ".bn2.run_var"), eps, mom,
              train);
    return op_relu(t, op_add_same(t, h, x));
}

}  // namespace detail

// Encoder: L times (stride-2 conv, bn, relu, residual blocks).
template <typename T>
void encoder_forward(Tape<T>& t, ParameterStore<T>& store, const ModelConfig& cfg,
                     const SparseTensor<T>& input, bool train, ModelOutput& out) {
    if (input.empty()) throw ContractError("encoder: empty input tensor");
    if (input.stride != 1) throw ContractError("encoder: input stride must be 1");
    if (input.channels() != cfg.in_channels) throw ContractError("encoder: channel mismatch");
    const T eps = T(1e-5), mom = T(0.1);
    const auto blocks = cfg.blocks();
    std::vector<Coord> coords = input.coords;
    int x = op_input(t, input.feats);
    int stride = 1;
    for (int l = 1; l <= cfg.levels; ++l) {
        const std::string pre = "enc" + std::to_string(l);
        std::vector<Coord> down = strided_out_coords(coords, stride);
        const int down_map = t.store_map(kernel_map_strided(coords, down, stride, 3));
        x = op_conv(t, x, &store.at(pre + ".down.w"), down_map);
        x = op_bn(t, x, &store.at(pre + ".down.bn.gamma"), &store.at(pre + ".down.bn.beta"),
                  &store.buffer(pre + ".down.bn.run_mean"), &store.buffer(pre + ".down.bn.run_var"),
                  eps, mom, train);
        x = op_relu(t, x);
        stride *= 2;
        coords = std::move(down);
        const int sub_map = t.store_map(kernel_map_submanifold(coords, stride, 3));
        for (int b = 0; b < blocks[l - 1]; ++b)
            x = detail::res_block(t, store, pre + ".block" + std::to_string(b), x, sub_map, train);
        out.enc_coords.push_back(coords);
        out.enc_feat.push_back(x);
    }
}

// Decoder per the generative scheme: start at the coarsest level; at each
// level apply the skip union (below the top), run both heads on the pre-prune
// support, prune by sparsity probability (optionally unioned with the forced
// ground-truth mask), then expand one level finer with the transposed conv.
// An empty pruned tensor stops expansion; finer levels come out empty.
template <typename T>
void decoder_forward(Tape<T>& t, ParameterStore<T>& store, const ModelConfig& cfg, bool train,
                     PruneMode mode, const std::vector<std::unordered_set<std::uint64_t>>* forced,
                     ModelOutput& out) {
    const T eps = T(1e-5), mom = T(0.1);
    out.levels.assign(cfg.levels, LevelOutput{});
    std::vector<Coord> coords = out.enc_coords[cfg.levels - 1];
    int x = out.enc_feat[cfg.levels - 1];
    for (int l = cfg.levels; l >= 1; --l) {
        LevelOutput& lo = out.levels[l - 1];
        if (l < cfg.levels) {
            if (coords.empty()) break;  // pruned to nothing above; stay empty
            SparseTensor<T> up(coords, t.val(x), 1 << l);
            SparseTensor<T> skip(out.enc_coords[l - 1], t.val(out.enc_feat[l - 1]), 1 << l);
            std::vector<int> a_rows, b_rows;
            SparseTensor<T> merged = tensor_add(up, skip, &a_rows, &b_rows);
            x = op_add_union(t, x, out.enc_feat[l - 1], std::move(merged.feats),
                             std::move(a_rows), std::move(b_rows));
            coords = std::move(merged.coords);
        }
        lo.coords = coords;
        const std::string head = "head" + std::to_string(l);
        const int id_map = t.store_map(kernel_map_submanifold(coords, 1 << l, 1));
        lo.anchor = op_bias(t, op_conv(t, x, &store.at(head + ".anchor.w"), id_map),
                            &store.at(head + ".anchor.b"));
        lo.sparsity_logit = op_bias(t, op_conv(t, x, &store.at(head + ".sparsity.w"), id_map),
                                    &store.at(head + ".sparsity.b"));
        lo.feat = x;
        const FeatMat<T>& logit = t.val(lo.sparsity_logit);
        lo.sparsity_prob.resize(coords.size());
        lo.kept.assign(coords.size(), 0);
        for (std::size_t i = 0; i < coords.size(); ++i) {
            lo.sparsity_prob[i] = logistic_scalar(double(logit.at(std::int64_t(i), 0)));
            const bool by_prob = lo.sparsity_prob[i] >= cfg.tau;
            const bool by_force =
                forced && (*forced)[l - 1].count(coord_key({0, coords[i].x, coords[i].y, coords[i].z}));
            switch (mode) {
                case PruneMode::threshold: lo.kept[i] = by_prob; break;
                case PruneMode::train_union: lo.kept[i] = by_prob || by_force; break;
                case PruneMode::forced_only: lo.kept[i] = by_force; break;
            }
        }
        if (l == 1) break;
        std::vector<int> rows = mask_to_rows(lo.kept);
        if (rows.empty()) {
            coords.clear();
            continue;
        }
        std::vector<Coord> kept_coords(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) kept_coords[i] = coords[rows[i]];
        x = op_gather(t, x, std::move(rows));
        std::vector<Coord> up = transposed_out_coords(kept_coords, 1 << (l - 1));
        const int tr_map = t.store_map(kernel_map_transposed(kept_coords, up, 1 << (l - 1)));
        const std::string dec = "dec" + std::to_string(l);
        x = op_conv(t, x, &store.at(dec + ".tr.w"), tr_map);
        x = op_bn(t, x, &store.at(dec + ".tr.bn.gamma"), &store.at(dec + ".tr.bn.beta"),
                  &store.buffer(dec + ".tr.bn.run_mean"), &store.buffer(dec + ".tr.bn.run_var"),
                  eps, mom, train);
        x = op_relu(t, x);
        coords = std::move(up);
    }
}

template <typename T>
ModelOutput model_forward(Tape<T>& t, ParameterStore<T>& store, const ModelConfig& cfg,
                          const SparseTensor<T>& input, bool train, PruneMode mode,
                          const std::vector<std::unordered_set<std::uint64_t>>* forced = nullptr) {
    ModelOutput out;
    encoder_forward(t, store, cfg, input, train, out);
    decoder_forward(t, store, cfg, train, mode, forced, out);
    return out;
}

// --- Loss -------------------------------------------------------------------

struct LossWeights {
    double s = 1.0, anc = 1.0, cls = 1.0, reg = 0.1;
};

struct LossBreakdown {
    double s = 0, anc = 0, cls = 0, reg = 0, total = 0;
};

struct LevelTargets {
    std::vector<char> sparsity_pos;                  // per pre-prune row
    std::vector<AnchorMatch> pos;                    // positive anchors
    std::vector<AnchorRef> neg;                      // negative anchors
    std::vector<std::array<double, 6>> pos_offsets;  // encoded regression targets
    std::vector<int> pos_class;                      // gt class per positive
};

// Builds per-level targets from ground truth over the realized supports.
inline std::vector<LevelTargets> build_targets(const ModelOutput& out, const ModelConfig& cfg,
                                               const std::vector<Box3D>& gt) {
    const AnchorConfig acfg = cfg.anchor_config();
    const int L = cfg.levels;
    std::vector<LevelTargets> tg(L);
    std::vector<std::vector<Coord>> supports(L);
    std::vector<std::vector<char>> anchor_pos(L);
    for (int l = 1; l <= L; ++l) {
        supports[l - 1] = out.levels[l - 1].coords;
        LevelMatch m = match_anchors(supports[l - 1], l, acfg, gt);
        anchor_pos[l - 1] = m.voxel_positive;
        auto& t = tg[l - 1];
        t.pos = std::move(m.pos);
        t.neg = std::move(m.neg);
        for (const AnchorMatch& pm : t.pos) {
            const Box3D ab = anchor_box(supports[l - 1][pm.row], l, pm.anchor, acfg);
            t.pos_offsets.push_back(encode_box(gt[pm.gt], ab));
            t.pos_class.push_back(gt[pm.gt].class_id);
        }
    }
    auto sp = sparsity_targets(supports, anchor_pos);
    for (int l = 0; l < L; ++l) tg[l].sparsity_pos = std::move(sp[l]);
    return tg;
}

enum class LossMode { balanced, plain };

// Single tape node holding all four loss terms, pooled across levels:
//   L_s, L_anc  — balanced (or plain) cross entropy on logits
//   L_class     — softmax cross entropy over positives
//   L_reg       — Huber (delta 1) mean over the 6 offsets of each positive
template <typename T>
int op_detection_loss(Tape<T>& t, const ModelConfig& cfg, const std::vector<LevelOutput>& levels,
                      std::shared_ptr<std::vector<LevelTargets>> targets, LossMode mode,
                      const LossWeights& w, LossBreakdown* breakdown = nullptr) {
    const int L = cfg.levels;
    const int slot = cfg.classes + 7;
    struct Ctx {
        std::vector<int> anchor_ids, sparsity_ids;  // -1 for empty levels
    };
    auto ctx = std::make_shared<Ctx>();
    for (int l = 0; l < L; ++l) {
        ctx->anchor_ids.push_back(levels[l].anchor);
        ctx->sparsity_ids.push_back(levels[l].sparsity_logit);
    }

    // Pooled counts
    std::int64_t sp_pos = 0, sp_neg = 0, anc_pos = 0, anc_neg = 0;
    for (int l = 0; l < L; ++l) {
        const auto& tg = (*targets)[l];
        for (char c : tg.sparsity_pos) (c ? sp_pos : sp_neg)++;
        anc_pos += std::int64_t(tg.pos.size());
        anc_neg += std::int64_t(tg.neg.size());
    }

    auto bce_norm = [&](bool positive, std::int64_t np, std::int64_t nn) {
        if (mode == LossMode::balanced) return positive ? 1.0 / (2.0 * double(np)) : 1.0 / (2.0 * double(nn));
        return 1.0 / double(np + nn);
    };

    LossBreakdown bd;
    for (int l = 0; l < L; ++l) {
        const auto& tg = (*targets)[l];
        if (ctx->sparsity_ids[l] >= 0) {
            const FeatMat<T>& z = t.val(ctx->sparsity_ids[l]);
            for (std::int64_t i = 0; i < z.rows; ++i) {
                const double p = clamp_prob(logistic_scalar(double(z.at(i, 0))));
                if (tg.sparsity_pos[i])
                    bd.s += -std::log(p) * bce_norm(true, sp_pos, sp_neg);
                else
                    bd.s += -std::log(1.0 - p) * bce_norm(false, sp_pos, sp_neg);
            }
        }
        if (ctx->anchor_ids[l] < 0) continue;
        const FeatMat<T>& h = t.val(ctx->anchor_ids[l]);
        for (const AnchorMatch& pm : tg.pos) {
            const double p = clamp_prob(logistic_scalar(double(h.at(pm.row, pm.anchor * slot))));
            bd.anc += -std::log(p) * bce_norm(true, anc_pos, anc_neg);
        }
        for (const AnchorRef& nm : tg.neg) {
            const double p = clamp_prob(logistic_scalar(double(h.at(nm.row, nm.anchor * slot))));
            bd.anc += -std::log(1.0 - p) * bce_norm(false, anc_pos, anc_neg);
        }
        for (std::size_t pi = 0; pi < tg.pos.size(); ++pi) {
            const AnchorMatch& pm = tg.pos[pi];
            const int base = pm.anchor * slot;
            // softmax CE over class logits
            double mx = -1e300;
            for (int c = 0; c < cfg.classes; ++c)
                mx = std::max(mx, double(h.at(pm.row, base + 7 + c)));
            double se = 0;
            for (int c = 0; c < cfg.classes; ++c)
                se += std::exp(double(h.at(pm.row, base + 7 + c)) - mx);
            const double logit_t = double(h.at(pm.row, base + 7 + tg.pos_class[pi]));
            bd.cls += (-(logit_t - mx) + std::log(se)) / double(anc_pos);
            for (int j = 0; j < 6; ++j) {
                const double r = double(h.at(pm.row, base + 1 + j)) - tg.pos_offsets[pi][j];
                bd.reg += huber(r) / (6.0 * double(anc_pos));
            }
        }
    }
    bd.total = w.s * bd.s + w.anc * bd.anc + w.cls * bd.cls + w.reg * bd.reg;
    if (!std::isfinite(bd.total)) throw NumericError("detection loss is not finite");
    if (breakdown) *breakdown = bd;

    FeatMat<T> val(1, 1);
    val.at(0, 0) = T(bd.total);
    const int classes = cfg.classes;
    auto tgs = targets;
    return t.emplace(std::move(val), [ctx, tgs, mode, w, slot, classes, sp_pos, sp_neg, anc_pos,
                                      anc_neg, L](Tape<T>& tp, int self) {
        const double g0 = double(tp.grad(self).at(0, 0));
        auto bce_norm = [&](bool positive, std::int64_t np, std::int64_t nn) {
            if (mode == LossMode::balanced)
                return positive ? 1.0 / (2.0 * double(np)) : 1.0 / (2.0 * double(nn));
            return 1.0 / double(np + nn);
        };
        for (int l = 0; l < L; ++l) {
            const auto& tg = (*tgs)[l];
            if (ctx->sparsity_ids[l] >= 0) {
                const FeatMat<T>& z = tp.val(ctx->sparsity_ids[l]);
                FeatMat<T>& gz = tp.grad(ctx->sparsity_ids[l]);
                for (std::int64_t i = 0; i < z.rows; ++i) {
                    const double p = logistic_scalar(double(z.at(i, 0)));
                    if (p <= 1e-7 || p >= 1.0 - 1e-7) continue;  // clamped flat
                    const double d = tg.sparsity_pos[i] ? -(1.0 - p) * bce_norm(true, sp_pos, sp_neg)
                                                        : p * bce_norm(false, sp_pos, sp_neg);
                    gz.at(i, 0) += T(g0 * w.s * d);
                }
            }
            if (ctx->anchor_ids[l] < 0) continue;
            const FeatMat<T>& h = tp.val(ctx->anchor_ids[l]);
            FeatMat<T>& gh = tp.grad(ctx->anchor_ids[l]);
            for (const AnchorMatch& pm : tg.pos) {
                const double p = logistic_scalar(double(h.at(pm.row, pm.anchor * slot)));
                if (p > 1e-7 && p < 1.0 - 1e-7)
                    gh.at(pm.row, pm.anchor * slot) +=
                        T(g0 * w.anc * -(1.0 - p) * bce_norm(true, anc_pos, anc_neg));
            }
            for (const AnchorRef& nm : tg.neg) {
                const double p = logistic_scalar(double(h.at(nm.row, nm.anchor * slot)));
                if (p > 1e-7 && p < 1.0 - 1e-7)
                    gh.at(nm.row, nm.anchor * slot) +=
                        T(g0 * w.anc * p * bce_norm(false, anc_pos, anc_neg));
            }
            for (std::size_t pi = 0; pi < tg.pos.size(); ++pi) {
                const AnchorMatch& pm = tg.pos[pi];
                const int base = pm.anchor * slot;
                double mx = -1e300;
                for (int c = 0; c < classes; ++c)
                    mx = std::max(mx, double(h.at(pm.row, base + 7 + c)));
                double se = 0;
                for (int c = 0; c < classes; ++c)
                    se += std::exp(double(h.at(pm.row, base + 7 + c)) - mx);
                for (int c = 0; c < classes; ++c) {
                    const double sm = std::exp(double(h.at(pm.row, base + 7 + c)) - mx) / se;
                    const double d = (sm - (c == tg.pos_class[pi] ? 1.0 : 0.0)) / double(anc_pos);
                    gh.at(pm.row, base + 7 + c) += T(g0 * w.cls * d);
                }
                for (int j = 0; j < 6; ++j) {
                    const double r = double(h.at(pm.row, base + 1 + j)) - tg.pos_offsets[pi][j];
                    gh.at(pm.row, base + 1 + j) += T(g0 * w.reg * huber_grad(r) / (6.0 * double(anc_pos)));
                }
            }
        }
    });
}

// Detections from the pre-prune rows of every level (the heads run before
// pruning), thresholded on objectness score. Offsets are clamped to the
// anchor quantization envelope (see kMaxLogSizeOff) before the boxes merge
// via NMS, so rows whose regression was never trained still land on their
// anchor and get absorbed into the duplicate cluster around the object.
template <typename T>
std::vector<Box3D> decode_detections(const Tape<T>& t, const ModelOutput& out,
                                     const ModelConfig& cfg, double score_thresh = 0.05,
                                     double nms_iou = 0.2) {
    const AnchorConfig acfg = cfg.anchor_config();
    const double max_c = max_center_off(acfg);
    const int slot = cfg.classes + 7;
    std::vector<Box3D> cands;
    for (int l = 1; l <= cfg.levels; ++l) {
        const LevelOutput& lo = out.levels[l - 1];
        if (lo.anchor < 0) continue;
        const FeatMat<T>& h = t.val(lo.anchor);
        for (std::int64_t r = 0; r < h.rows; ++r) {
            for (int a = 0; a < cfg.anchors(); ++a) {
                const double score = logistic_scalar(double(h.at(r, a * slot)));
                if (score < score_thresh) continue;
                std::array<double, 6> off;
                for (int j = 0; j < 6; ++j) off[j] = double(h.at(r, a * slot + 1 + j));
                for (int j = 0; j < 3; ++j) off[j] = std::clamp(off[j], -max_c, max_c);
                for (int j = 3; j < 6; ++j)
                    off[j] = std::clamp(off[j], -kMaxLogSizeOff, kMaxLogSizeOff);
                int best_c = 0;
                double best_v = double(h.at(r, a * slot + 7));
                for (int c = 1; c < cfg.classes; ++c)
                    if (double(h.at(r, a * slot + 7 + c)) > best_v) {
                        best_v = double(h.at(r, a * slot + 7 + c));
                        best_c = c;
                    }
                Box3D b = decode_box(off, anchor_box(lo.coords[r], l, a, acfg));
                b.class_id = best_c;
                b.score = score;
                cands.push_back(b);
            }
        }
    }
    return nms_merge(std::move(cands), nms_iou);
}

}  // namespace gsdn
