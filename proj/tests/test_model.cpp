#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "gsdn/model.hpp"
#include "oracles.hpp"

using namespace gsdn;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.levels = 3;
    cfg.in_channels = 1;
    cfg.base_channels = 4;
    cfg.backbone = "res14";
    cfg.classes = 3;
    cfg.tau = 0.3;
    cfg.ratio_seeds = {1.0, 2.0};
    return cfg;
}

SparseTensor<float> blob_input(Rng& rng, int n, int extent) {
    SparseTensor<float> t = oracle::random_tensor<float>(rng, n, extent, 1);
    for (auto& v : t.feats.data) v = 1.f;  // occupancy
    return t;
}

// Guarantees the cell (2,2,2) and its coarse parents appear in every encoder
// support, so tests can place ground truth on a known anchor.
SparseTensor<float> blob_with_cluster(Rng& rng, int n, int extent) {
    SparseTensor<float> t = blob_input(rng, n, extent);
    for (const Coord& c : {Coord{0, 2, 2, 2}, Coord{0, 3, 2, 2}, Coord{0, 2, 3, 3}})
        t.coords.push_back(c);
    std::sort(t.coords.begin(), t.coords.end());
    t.coords.erase(std::unique(t.coords.begin(), t.coords.end()), t.coords.end());
    t.feats = FeatMat<float>(std::int64_t(t.coords.size()), 1, 1.f);
    return t;
}

// The level-1 anchor box sitting exactly on cell (2,2,2): IoU 1 with itself,
// so matching it is guaranteed positive.
Box3D cluster_gt(const ModelConfig& cfg, int cls) {
    Box3D g = anchor_box({0, 2, 2, 2}, 1, 0, cfg.anchor_config());
    g.class_id = cls;
    return g;
}

}  // namespace

TEST_CASE("config validation and derived sizes") {
    ModelConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.channels_at(1) == 4);
    CHECK(cfg.channels_at(3) == 16);
    CHECK(cfg.anchors() == 4);  // seed 1 -> identity, seed 2 -> three perms
    CHECK(cfg.head_width() == (3 + 7) * 4);
    CHECK(cfg.blocks() == std::vector<int>{1, 1, 1});
    cfg.backbone = "res18";
    CHECK(cfg.blocks() == std::vector<int>{2, 2, 2});
    cfg.backbone = "res34";
    CHECK(cfg.blocks() == std::vector<int>{3, 4, 6});
    cfg.backbone = "res9";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.backbone = "res14";
    cfg.tau = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.tau = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.tau = 0.3;
    cfg.levels = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("build_params is deterministic and sets head priors") {
    ModelConfig cfg = tiny_config();
    ParameterStore<float> a, b;
    build_params(a, cfg, 42);
    build_params(b, cfg, 42);
    REQUIRE(a.params.size() == b.params.size());
    for (const auto& [name, p] : a.params) {
        CHECK(p.w == b.at(name).w);
        // momentum starts at zero
        for (float v : p.m.data) CHECK(v == 0.f);
    }
    ParameterStore<float> c;
    build_params(c, cfg, 43);
    bool any_diff = false;
    for (const auto& [name, p] : a.params)
        if (!(p.w == c.at(name).w)) any_diff = true;
    CHECK(any_diff);

    const float prior = float(-std::log((1.0 - 0.01) / 0.01));
    const auto& ab = a.at("head3.anchor.b").w.data;
    const int slot = cfg.classes + 7;
    for (int k = 0; k < cfg.anchors(); ++k) {
        CHECK(ab[std::size_t(k * slot)] == doctest::Approx(prior));
        for (int j = 1; j < slot; ++j) CHECK(ab[std::size_t(k * slot + j)] == 0.f);
    }
    CHECK(a.at("head1.sparsity.b").w.data[0] == doctest::Approx(prior));
    for (float v : a.at("enc1.down.bn.gamma").w.data) CHECK(v == 1.f);
    for (float v : a.at("enc1.down.bn.beta").w.data) CHECK(v == 0.f);
    CHECK(a.buffer("enc1.down.bn.run_var")[0] == 1.f);
}

TEST_CASE("encoder halves support stride per level and widens channels") {
    ModelConfig cfg = tiny_config();
    ParameterStore<float> store;
    build_params(store, cfg, 1);
    Rng rng(9);
    SparseTensor<float> in = blob_input(rng, 200, 16);

    Tape<float> t;
    ModelOutput out;
    encoder_forward(t, store, cfg, in, /*train=*/true, out);
    REQUIRE(int(out.enc_coords.size()) == cfg.levels);
    int prev = int(in.nnz());
    for (int l = 1; l <= cfg.levels; ++l) {
        const auto& coords = out.enc_coords[l - 1];
        const int s = 1 << l;
        CHECK(!coords.empty());
        CHECK(int(coords.size()) <= prev);
        for (const Coord& c : coords) {
            CHECK(c.x % s == 0);
            CHECK(c.y % s == 0);
            CHECK(c.z % s == 0);
        }
        CHECK(t.val(out.enc_feat[l - 1]).cols == cfg.channels_at(l));
        CHECK(t.val(out.enc_feat[l - 1]).rows == std::int64_t(coords.size()));
        prev = int(coords.size());
    }
}

TEST_CASE("encoder rejects empty or mismatched input") {
    ModelConfig cfg = tiny_config();
    ParameterStore<float> store;
    build_params(store, cfg, 1);
    Tape<float> t;
    ModelOutput out;
    SparseTensor<float> empty;
    empty.stride = 1;
    empty.feats = FeatMat<float>(0, 1);
    CHECK_THROWS_AS(encoder_forward(t, store, cfg, empty, true, out), ContractError);
    Rng rng(10);
    SparseTensor<float> in = blob_input(rng, 20, 8);
    in.stride = 2;
    for (auto& c : in.coords) {
        c.x *= 2;
        c.y *= 2;
        c.z *= 2;
    }
    CHECK_THROWS_AS(encoder_forward(t, store, cfg, in, true, out), ContractError);
}

TEST_CASE("decoder output shapes and stencil bound") {
    ModelConfig cfg = tiny_config();
    cfg.tau = 0.0;  // keep everything
    ParameterStore<float> store;
    build_params(store, cfg, 2);
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        SparseTensor<float> in = blob_input(rng, 120 + trial * 20, 16);
        Tape<float> t;
        ModelOutput out = model_forward(t, store, cfg, in, /*train=*/false,
                                        PruneMode::threshold);
        REQUIRE(int(out.levels.size()) == cfg.levels);
        for (int l = cfg.levels; l >= 1; --l) {
            const LevelOutput& lo = out.levels[l - 1];
            REQUIRE(!lo.coords.empty());
            const std::int64_t nnz = std::int64_t(lo.coords.size());
            CHECK(t.val(lo.anchor).rows == nnz);
            CHECK(t.val(lo.anchor).cols == cfg.head_width());
            CHECK(t.val(lo.sparsity_logit).rows == nnz);
            CHECK(t.val(lo.sparsity_logit).cols == 1);
            CHECK(std::int64_t(lo.sparsity_prob.size()) == nnz);
            for (double p : lo.sparsity_prob) {
                CHECK(p >= 0.0);
                CHECK(p <= 1.0);
            }
            CHECK(std::int64_t(lo.kept.size()) == nnz);
            // tau = 0 keeps every row
            for (char k : lo.kept) CHECK(k == 1);
            if (l < cfg.levels) {
                // generative expansion: child support within 27x parent count
                std::size_t kept_above = 0;
                for (char k : out.levels[l].kept) kept_above += std::size_t(k);
                CHECK(lo.coords.size() <= 27 * kept_above + out.enc_coords[l - 1].size());
            }
        }
    }
}

TEST_CASE("tau=1 stops expansion: only the coarsest level has rows") {
    ModelConfig cfg = tiny_config();
    cfg.tau = 1.0;
    ParameterStore<float> store;
    build_params(store, cfg, 3);
    Rng rng(12);
    SparseTensor<float> in = blob_input(rng, 150, 16);
    Tape<float> t;
    ModelOutput out = model_forward(t, store, cfg, in, false, PruneMode::threshold);
    CHECK(!out.levels[cfg.levels - 1].coords.empty());
    for (char k : out.levels[cfg.levels - 1].kept) CHECK(k == 0);
    for (int l = 1; l < cfg.levels; ++l) CHECK(out.levels[l - 1].coords.empty());
    // detections still come from the coarsest level's pre-prune rows
    std::vector<Box3D> dets = decode_detections(t, out, cfg, 0.0, 0.2);
    CHECK(!dets.empty());
}

TEST_CASE("train_union keeps forced voxels even when the net prunes them") {
    ModelConfig cfg = tiny_config();
    cfg.tau = 1.0;  // the net alone would drop everything
    ParameterStore<float> store;
    build_params(store, cfg, 4);
    Rng rng(13);
    SparseTensor<float> in = blob_with_cluster(rng, 150, 16);

    std::vector<Box3D> gt = {cluster_gt(cfg, 0)};
    auto forced = forced_sets(gt, cfg.levels, cfg.anchor_config());
    for (int l = 0; l < cfg.levels; ++l) REQUIRE(!forced[l].empty());

    Tape<float> t;
    ModelOutput out = model_forward(t, store, cfg, in, true, PruneMode::train_union, &forced);
    for (int l = cfg.levels; l >= 1; --l) {
        const LevelOutput& lo = out.levels[l - 1];
        for (std::size_t i = 0; i < lo.coords.size(); ++i)
            if (forced[l - 1].count(coord_key(lo.coords[i]))) CHECK(lo.kept[i] == 1);
    }
    // finer levels got their forced seeds expanded
    CHECK(!out.levels[0].coords.empty());
}

TEST_CASE("model forward is translation equivariant by a full top-level cell") {
    ModelConfig cfg = tiny_config();
    cfg.tau = 0.0;  // keep every level populated so all features compare
    ParameterStore<float> store;
    build_params(store, cfg, 5);
    Rng rng(14);
    SparseTensor<float> in = blob_input(rng, 100, 12);
    const int shift = 1 << cfg.levels;

    SparseTensor<float> moved = in;
    for (auto& c : moved.coords) {
        c.x += shift;
        c.y += 2 * shift;
        c.z += shift;
    }

    Tape<float> t1, t2;
    ModelOutput o1 = model_forward(t1, store, cfg, in, false, PruneMode::threshold);
    ModelOutput o2 = model_forward(t2, store, cfg, moved, false, PruneMode::threshold);
    for (int l = 1; l <= cfg.levels; ++l) {
        const LevelOutput& a = o1.levels[l - 1];
        const LevelOutput& b = o2.levels[l - 1];
        REQUIRE(a.coords.size() == b.coords.size());
        for (std::size_t i = 0; i < a.coords.size(); ++i) {
            CHECK(b.coords[i].x == a.coords[i].x + shift);
            CHECK(b.coords[i].y == a.coords[i].y + 2 * shift);
            CHECK(b.coords[i].z == a.coords[i].z + shift);
        }
        const FeatMat<float>& fa = t1.val(a.anchor);
        const FeatMat<float>& fb = t2.val(b.anchor);
        REQUIRE(fa.rows == fb.rows);
        CHECK(std::memcmp(fa.data.data(), fb.data.data(), fa.data.size() * sizeof(float)) == 0);
        CHECK(a.kept == b.kept);
    }
}

TEST_CASE("build_targets aligns positives with pre-prune rows") {
    ModelConfig cfg = tiny_config();
    cfg.tau = 0.0;
    ParameterStore<float> store;
    build_params(store, cfg, 6);
    Rng rng(15);
    SparseTensor<float> in = blob_with_cluster(rng, 150, 16);
    std::vector<Box3D> gt = {cluster_gt(cfg, 1)};

    Tape<float> t;
    ModelOutput out = model_forward(t, store, cfg, in, true, PruneMode::train_union,
                                    nullptr);
    auto tg = build_targets(out, cfg, gt);
    REQUIRE(int(tg.size()) == cfg.levels);
    std::size_t total_pos = 0;
    for (const auto& l : tg) total_pos += l.pos.size();
    REQUIRE(total_pos > 0);
    for (int l = 0; l < cfg.levels; ++l) {
        CHECK(tg[l].sparsity_pos.size() == out.levels[l].coords.size());
        CHECK(tg[l].pos_offsets.size() == tg[l].pos.size());
        CHECK(tg[l].pos_class.size() == tg[l].pos.size());
        for (const AnchorMatch& m : tg[l].pos) {
            CHECK(m.row < int(out.levels[l].coords.size()));
            CHECK(m.anchor < cfg.anchors());
            CHECK(m.gt == 0);
            // positive anchors imply a sparsity-positive voxel
            CHECK(tg[l].sparsity_pos[std::size_t(m.row)] == 1);
        }
        for (int c : tg[l].pos_class) CHECK(c == 1);
    }
}

TEST_CASE("loss breakdown composes with the documented weights") {
    ModelConfig cfg = tiny_config();
    cfg.tau = 0.0;
    ParameterStore<float> store;
    build_params(store, cfg, 7);
    Rng rng(16);
    SparseTensor<float> in = blob_with_cluster(rng, 120, 16);
    std::vector<Box3D> gt = {cluster_gt(cfg, 0)};

    Tape<float> t;
    ModelOutput out = model_forward(t, store, cfg, in, true, PruneMode::train_union, nullptr);
    auto tg = std::make_shared<std::vector<LevelTargets>>(build_targets(out, cfg, gt));
    LossWeights w;
    LossBreakdown bd;
    const int loss = op_detection_loss(t, cfg, out.levels, tg, LossMode::balanced, w, &bd);
    CHECK(std::isfinite(bd.total));
    CHECK(bd.total ==
          doctest::Approx(w.s * bd.s + w.anc * bd.anc + w.cls * bd.cls + w.reg * bd.reg));
    CHECK(bd.s > 0);
    CHECK(bd.anc > 0);
    CHECK(t.val(loss).rows == 1);

    // at the prior init, objectness probabilities start near pi = 0.01, so the
    // negative side of the balanced CE is tiny and the positive side is steep
    CHECK(bd.anc > 1.0);

    t.backward(loss);
    double gnorm = 0;
    for (const auto& [name, p] : store.params)
        for (float v : p.g.data) gnorm += double(v) * v;
    CHECK(gnorm > 0.0);
}

TEST_CASE("loss gradients match finite differences on a small double model") {
    ModelConfig cfg;
    cfg.levels = 2;
    cfg.in_channels = 1;
    cfg.base_channels = 2;
    cfg.classes = 2;
    cfg.ratio_seeds = {1.0};
    cfg.tau = 0.5;
    cfg.anchor_scale = 2.0;

    ParameterStore<double> store;
    build_params(store, cfg, 13);
    auto buffers0 = store.buffers;

    Rng rng(17);
    SparseTensor<double> in;
    in.stride = 1;
    in.coords = {{0, 0, 0, 0}, {0, 1, 1, 0}, {0, 2, 1, 1}, {0, 3, 3, 2}, {0, 5, 2, 1}};
    in.feats = FeatMat<double>(5, 1);
    for (auto& v : in.feats.data) v = rng.uniform(0.5, 1.5);

    std::vector<Box3D> gt;
    Box3D g;
    g.center = {0.1, 0.1, 0.05};
    g.size = {0.22, 0.22, 0.2};
    g.class_id = 1;
    gt.push_back(g);
    auto forced = forced_sets(gt, cfg.levels, cfg.anchor_config());

    auto loss_value = [&]() {
        store.buffers = buffers0;
        Tape<double> t;
        ModelOutput out = model_forward(t, store, cfg, in, true, PruneMode::forced_only, &forced);
        auto tg = std::make_shared<std::vector<LevelTargets>>(build_targets(out, cfg, gt));
        LossBreakdown bd;
        op_detection_loss(t, cfg, out.levels, tg, LossMode::balanced, LossWeights{}, &bd);
        return bd.total;
    };
    auto backward = [&]() {
        store.buffers = buffers0;
        Tape<double> t;
        ModelOutput out = model_forward(t, store, cfg, in, true, PruneMode::forced_only, &forced);
        auto tg = std::make_shared<std::vector<LevelTargets>>(build_targets(out, cfg, gt));
        const int l = op_detection_loss(t, cfg, out.levels, tg, LossMode::balanced, LossWeights{});
        t.backward(l);
        store.buffers = buffers0;
    };
    GradCheckResult res = grad_check(store, loss_value, backward, 1e-5);
    INFO("worst ", res.worst_param, "[", res.worst_index, "], entries ", res.entries);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("detections decode from pre-prune rows and carry calibrated scores") {
    ModelConfig cfg = tiny_config();
    cfg.tau = 0.3;
    ParameterStore<float> store;
    build_params(store, cfg, 8);
    Rng rng(18);
    SparseTensor<float> in = blob_input(rng, 150, 16);
    Tape<float> t;
    ModelOutput out = model_forward(t, store, cfg, in, false, PruneMode::threshold);
    std::vector<Box3D> dets = decode_detections(t, out, cfg, 0.0, 0.2);
    for (const Box3D& d : dets) {
        CHECK(d.score >= 0.0);
        CHECK(d.score <= 1.0);
        CHECK(d.class_id >= 0);
        CHECK(d.class_id < cfg.classes);
        for (double s : d.size) CHECK(s > 0.0);
    }
    // score threshold filters
    std::vector<Box3D> none = decode_detections(t, out, cfg, 1.0, 0.2);
    CHECK(none.empty());
}
