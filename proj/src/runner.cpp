#include "gsdn/runner.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace gsdn {

PreparedScene prepare_scene(const SceneBundle& bundle, const ModelConfig& cfg,
                            const std::string& name) {
    PreparedScene ps;
    ps.name = name;
    ps.n_points = std::int64_t(bundle.points.size());
    FeatMat<float> ones(std::int64_t(bundle.points.size()), cfg.in_channels, 1.f);
    ps.input = quantize(bundle.points, ones, cfg.voxel_size).tensor;
    ps.gt = bundle.gt_boxes;
    ps.forced = forced_sets(ps.gt, cfg.levels, cfg.anchor_config());
    return ps;
}

static double ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
}

TrainResult train_run(const RunConfig& cfg, const std::vector<SceneBundle>& scenes,
                      ParameterStore<float>& store, std::int64_t start_iter,
                      const std::string& out_dir,
                      const std::function<void(const TrainLogRow&)>& on_log) {
    if (scenes.empty()) throw DataError("train: no scenes");
    std::vector<PreparedScene> prep;
    prep.reserve(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i)
        prep.push_back(prepare_scene(scenes[i], cfg.model, "scene" + std::to_string(i)));

    OptimizerConfig opt = cfg.optimizer;
    opt.total_iters = cfg.schedule_iters();
    std::ofstream log_file;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        log_file.open(out_dir + "/train_log.csv");
        log_file << "iter,lr,loss_s,loss_anc,loss_class,loss_reg,loss_total\n";
    }
    TrainResult res;
    auto emit = [&](const TrainLogRow& row) {
        res.log.push_back(row);
        if (log_file) {
            char buf[256];
            std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                          (long long)row.iter, row.lr, row.loss.s, row.loss.anc, row.loss.cls,
                          row.loss.reg, row.loss.total);
            log_file << buf;
        }
        if (on_log) on_log(row);
    };

    const std::int64_t end_iter = cfg.train.iterations;
    for (std::int64_t it = start_iter; it < end_iter; ++it) {
        const PreparedScene& sc = prep[std::size_t(it % std::int64_t(prep.size()))];
        const double lr = lr_at(std::min(it, opt.total_iters), opt);
        Tape<float> tape;
        LossBreakdown bd;
        try {
            ModelOutput out = model_forward(tape, store, cfg.model, sc.input, true,
                                            PruneMode::train_union, &sc.forced);
            auto targets = std::make_shared<std::vector<LevelTargets>>(
                build_targets(out, cfg.model, sc.gt));
            const int loss_id = op_detection_loss(tape, cfg.model, out.levels, targets,
                                                  cfg.loss_mode(), cfg.loss.weights, &bd);
            tape.backward(loss_id);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (iteration " + std::to_string(it) +
                               ", " + sc.name + ")");
        }
        sgd_step(store, lr, opt);
        if (it == start_iter || (it + 1) % cfg.train.log_every == 0 || it + 1 == end_iter)
            emit({it, lr, bd});
        if (!out_dir.empty() && cfg.train.checkpoint_every > 0 &&
            (it + 1) % cfg.train.checkpoint_every == 0 && it + 1 != end_iter)
            save_checkpoint(store, cfg.model, it + 1,
                            out_dir + "/ckpt_" + std::to_string(it + 1) + ".bin");
    }
    if (!out_dir.empty()) save_checkpoint(store, cfg.model, end_iter, out_dir + "/ckpt.bin");
    res.iterations = end_iter;
    return res;
}

std::vector<Box3D> run_detect(ParameterStore<float>& store, const ModelConfig& cfg,
                              const PreparedScene& scene, const DetectConfig& dcfg,
                              DetectStats* stats) {
    if (scene.input.empty()) {
        if (stats) *stats = DetectStats{};
        return {};
    }
    const std::int64_t base = MemGauge::current();
    MemGauge::reset_peak();
    auto t0 = std::chrono::steady_clock::now();
    Tape<float> tape;
    ModelOutput out =
        model_forward(tape, store, cfg, scene.input, false, PruneMode::threshold, nullptr);
    const double fwd = ms_since(t0);
    const std::int64_t peak = MemGauge::peak() - base;
    t0 = std::chrono::steady_clock::now();
    std::vector<Box3D> dets =
        decode_detections(tape, out, cfg, dcfg.score_thresh, dcfg.nms_iou);
    const double post = ms_since(t0);
    if (stats) {
        stats->level_nnz.clear();
        for (const LevelOutput& lo : out.levels)
            stats->level_nnz.push_back(std::int64_t(lo.coords.size()));
        stats->input_nnz = scene.input.nnz();
        stats->points = scene.n_points;
        stats->forward_ms = fwd;
        stats->post_ms = post;
        stats->peak_bytes = peak;
    }
    return dets;
}

}  // namespace gsdn
