// gsdn: synthetic-scene 3D detection pipeline.
// Subcommands: synth, train, detect, eval, gradcheck, bench, ablate.
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#include "gsdn/config.hpp"
#include "gsdn/eval.hpp"
#include "gsdn/runner.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gsdn;

namespace {

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& sets) {
    if (path.empty()) {
        RunConfig cfg = default_run_config();
        if (!sets.empty()) {
            // route overrides through the JSON layer for identical semantics
            return run_config_from_text(run_config_to_json(cfg), sets);
        }
        return cfg;
    }
    return load_run_config(path, sets);
}

std::vector<std::string> scene_dirs(const std::string& root) {
    std::vector<std::string> dirs;
    if (!fs::is_directory(root)) throw DataError(root + " is not a directory");
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && fs::exists(e.path() / "points.ply")) dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw DataError("no scene directories under " + root);
    return dirs;
}

int cmd_synth(const RunConfig& cfg, const std::string& out, int n_scenes) {
    fs::create_directories(out);
    json manifest;
    manifest["master_seed"] = cfg.seed;
    manifest["scenes"] = json::array();
    for (int i = 0; i < n_scenes; ++i) {
        SynthSpec spec = cfg.synth;
        spec.seed = split_seed(cfg.seed, std::uint64_t(i));
        char name[32];
        std::snprintf(name, sizeof name, "scene_%04d", i);
        save_scene(synth_scene(spec), out + "/" + name);
        manifest["scenes"].push_back({{"dir", name}, {"seed", spec.seed}});
    }
    std::ofstream f(out + "/manifest.json");
    f << manifest.dump(2) << '\n';
    std::printf("wrote %d scenes to %s\n", n_scenes, out.c_str());
    return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& data, const std::string& out,
              const std::string& resume) {
    std::vector<SceneBundle> scenes;
    for (const std::string& d : scene_dirs(data)) scenes.push_back(load_scene(d));
    ParameterStore<float> store;
    std::int64_t start = 0;
    if (!resume.empty()) {
        ModelConfig mc;
        start = load_checkpoint(store, mc, resume);
        if (model_config_to_json(mc) != model_config_to_json(cfg.model))
            throw ConfigError("resume checkpoint config differs from run config");
        std::printf("resuming from %s at iteration %lld\n", resume.c_str(), (long long)start);
    } else {
        build_params(store, cfg.model, cfg.seed);
    }
    std::printf("parameters: %lld\n", (long long)store.count());
    train_run(cfg, scenes, store, start, out, [](const TrainLogRow& r) {
        std::printf("iter %6lld  lr %.5f  s %.4f anc %.4f cls %.4f reg %.4f  total %.4f\n",
                    (long long)r.iter, r.lr, r.loss.s, r.loss.anc, r.loss.cls, r.loss.reg,
                    r.loss.total);
        std::fflush(stdout);
    });
    std::printf("final checkpoint: %s/ckpt.bin\n", out.c_str());
    return 0;
}

int cmd_detect(const std::string& ckpt, const std::string& input, const std::string& out_path,
               const std::vector<std::string>& sets) {
    ParameterStore<float> store;
    ModelConfig mc;
    load_checkpoint(store, mc, ckpt);
    RunConfig rc = default_run_config();
    rc.model = mc;
    if (!sets.empty()) rc = run_config_from_text(run_config_to_json(rc), sets);
    PreparedScene scene = prepare_scene(load_scene(input), rc.model, input);
    DetectStats stats;
    std::vector<Box3D> dets = run_detect(store, rc.model, scene, rc.detect, &stats);
    for (std::size_t l = 0; l < stats.level_nnz.size(); ++l)
        std::printf("level %zu nnz %lld\n", l + 1, (long long)stats.level_nnz[l]);
    std::printf("input nnz %lld  forward %.1f ms  post %.1f ms  detections %zu\n",
                (long long)stats.input_nnz, stats.forward_ms, stats.post_ms, dets.size());
    save_boxes(dets, out_path);
    return 0;
}

void collect_eval_pair(const std::string& pred, const std::string& gt,
                       std::vector<std::vector<Box3D>>& preds,
                       std::vector<std::vector<Box3D>>& gts) {
    if (fs::is_directory(gt)) {
        if (!fs::is_directory(pred))
            throw DataError("--gt is a directory, so --pred must be one too");
        for (const auto& e : scene_dirs(gt)) {
            const std::string name = fs::path(e).filename().string();
            const std::string gt_file = e + "/boxes.json";
            if (!fs::exists(gt_file)) throw DataError("missing " + gt_file);
            std::string pred_file = pred + "/" + name + ".json";
            if (!fs::exists(pred_file)) pred_file = pred + "/" + name + "/det.json";
            if (!fs::exists(pred_file))
                throw DataError("no prediction for scene " + name + " under " + pred);
            gts.push_back(load_boxes(gt_file));
            preds.push_back(load_boxes(pred_file));
        }
    } else {
        preds.push_back(load_boxes(pred));
        gts.push_back(load_boxes(gt));
    }
}

int cmd_eval(const std::string& pred, const std::string& gt, std::vector<double> ious,
             const std::string& out) {
    std::vector<std::vector<Box3D>> preds, gts;
    collect_eval_pair(pred, gt, preds, gts);
    fs::create_directories(out);
    json report;
    for (double iou : ious) {
        ApResult ap = average_precision(preds, gts, iou);
        char key[32];
        std::snprintf(key, sizeof key, "iou_%g", iou);
        json per;
        for (const auto& [cls, v] : ap.per_class) per[std::to_string(cls)] = v;
        report[key] = {{"per_class", per}, {"mAP", ap.map}};
        std::printf("mAP@%g = %.4f\n", iou, ap.map);
        for (const auto& [cls, v] : ap.per_class) {
            auto samples = pr_curve(preds, gts, iou, cls);
            char name[64];
            std::snprintf(name, sizeof name, "%s/pr_%d_iou_%g.csv", out.c_str(), cls, iou);
            write_pr_csv(samples, name);
        }
    }
    std::ofstream f(out + "/eval.json");
    f << report.dump(2) << '\n';
    return 0;
}

int cmd_gradcheck(const RunConfig& base) {
    // Tiny full model in float64 on a handful of voxels; probes every entry.
    RunConfig cfg = base;
    cfg.model.base_channels = 2;
    cfg.model.backbone = "res14";
    cfg.model.levels = std::min(cfg.model.levels, 3);
    cfg.model.classes = std::min(cfg.model.classes, 3);
    cfg.model.ratio_seeds = {1.0, 2.0};
    cfg.model.anchor_scale = 4.0;
    cfg.synth.class_sizes.resize(std::size_t(cfg.model.classes));

    Rng rng(cfg.seed);
    std::vector<Coord> coords;
    // a small blob plus an isolated voxel; <= 30 cells
    for (int i = 0; i < 40 && coords.size() < 28; ++i)
        coords.push_back({0, int(rng.below(6)), int(rng.below(6)), int(rng.below(4))});
    coords.push_back({0, 12, 3, 2});
    std::sort(coords.begin(), coords.end());
    coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    SparseTensor<double> input;
    input.coords = coords;
    input.stride = 1;
    input.feats = FeatMat<double>(std::int64_t(coords.size()), 1);
    for (auto& v : input.feats.data) v = rng.uniform(0.5, 1.5);

    std::vector<Box3D> gt;
    Box3D g;
    g.center = {cfg.model.voxel_size * 3, cfg.model.voxel_size * 3, cfg.model.voxel_size * 2};
    g.size = {0.45, 0.45, 0.4};
    g.class_id = 0;
    gt.push_back(g);
    auto forced = forced_sets(gt, cfg.model.levels, cfg.model.anchor_config());

    ParameterStore<double> store;
    build_params(store, cfg.model, cfg.seed);
    auto buffers0 = store.buffers;

    LossMode mode = cfg.loss_mode();
    auto loss_value = [&]() {
        store.buffers = buffers0;
        Tape<double> tape;
        ModelOutput out =
            model_forward(tape, store, cfg.model, input, true, PruneMode::forced_only, &forced);
        auto targets =
            std::make_shared<std::vector<LevelTargets>>(build_targets(out, cfg.model, gt));
        LossBreakdown bd;
        op_detection_loss(tape, cfg.model, out.levels, targets, mode, cfg.loss.weights, &bd);
        return bd.total;
    };
    auto backward = [&]() {
        store.buffers = buffers0;
        Tape<double> tape;
        ModelOutput out =
            model_forward(tape, store, cfg.model, input, true, PruneMode::forced_only, &forced);
        auto targets =
            std::make_shared<std::vector<LevelTargets>>(build_targets(out, cfg.model, gt));
        const int loss = op_detection_loss(tape, cfg.model, out.levels, targets, mode,
                                           cfg.loss.weights, nullptr);
        tape.backward(loss);
        store.buffers = buffers0;
    };

    GradCheckResult res = grad_check(store, loss_value, backward, 1e-5);
    std::printf("gradcheck: %lld entries, max rel err %.3e (%s[%lld])\n", (long long)res.entries,
                res.max_rel_err, res.worst_param.c_str(), (long long)res.worst_index);
    const bool pass = res.max_rel_err < 1e-6;
    std::printf("gradcheck: %s\n", pass ? "PASS" : "FAIL");
    if (!pass) throw NumericError("gradient check exceeded 1e-6");
    return 0;
}

int cmd_bench(const RunConfig& cfg, const std::string& out_csv, int steps) {
    // Geometric nnz ladder: disjoint integer translations of one base scene.
    SynthSpec spec = cfg.synth;
    spec.seed = split_seed(cfg.seed, 0);
    PreparedScene base = prepare_scene(synth_scene(spec), cfg.model, "base");
    ParameterStore<float> store;
    build_params(store, cfg.model, cfg.seed);

    const int span = 1 << cfg.model.levels;
    std::int32_t width = 0;
    for (const Coord& c : base.input.coords) width = std::max(width, c.x);
    const std::int32_t shift = ((width / span) + 4) * span;

    std::vector<BenchRow> rows;
    std::vector<double> nnzs, times, mems;
    DetectConfig dcfg = cfg.detect;
    for (int s = 0; s < steps; ++s) {
        const int copies = 1 << s;
        PreparedScene scene;
        scene.name = "ladder_" + std::to_string(s);
        scene.n_points = base.n_points * copies;
        scene.input.stride = 1;
        std::vector<Coord> coords;
        coords.reserve(base.input.coords.size() * std::size_t(copies));
        for (int k = 0; k < copies; ++k)
            for (const Coord& c : base.input.coords)
                coords.push_back({c.b, c.x + k * shift, c.y, c.z});
        std::sort(coords.begin(), coords.end());
        scene.input.coords = std::move(coords);
        scene.input.feats =
            FeatMat<float>(std::int64_t(scene.input.coords.size()), cfg.model.in_channels, 1.f);
        // warm-up, then the measured run
        DetectStats stats;
        run_detect(store, cfg.model, scene, dcfg, &stats);
        run_detect(store, cfg.model, scene, dcfg, &stats);
        rows.push_back({scene.name, scene.n_points, stats.input_nnz, stats.forward_ms,
                        stats.post_ms, double(stats.peak_bytes) / (1024.0 * 1024.0)});
        nnzs.push_back(double(stats.input_nnz));
        times.push_back(stats.forward_ms);
        mems.push_back(double(stats.peak_bytes));
        std::printf("%s: points %lld nnz %lld forward %.1f ms post %.1f ms peak %.1f MB\n",
                    scene.name.c_str(), (long long)scene.n_points, (long long)stats.input_nnz,
                    stats.forward_ms, stats.post_ms, rows.back().peak_mb);
        std::fflush(stdout);
    }
    if (!out_csv.empty()) write_bench_csv(rows, out_csv);
    LinFit tf = least_squares(nnzs, times), mf = least_squares(nnzs, mems);
    std::printf("time  vs nnz: slope %.6g ms/voxel, R^2 %.4f\n", tf.slope, tf.r2);
    std::printf("peak  vs nnz: slope %.6g B/voxel,  R^2 %.4f\n", mf.slope, mf.r2);
    for (std::size_t s = 1; s < times.size(); ++s)
        std::printf("step %zu: time ratio %.2f (nnz ratio %.2f)\n", s, times[s] / times[s - 1],
                    nnzs[s] / nnzs[s - 1]);
    return 0;
}

int cmd_ablate(const RunConfig& base, const std::string& data, const std::string& out_dir) {
    std::vector<SceneBundle> scenes;
    for (const std::string& d : scene_dirs(data)) scenes.push_back(load_scene(d));
    fs::create_directories(out_dir);

    struct Run {
        std::string axis, name;
        RunConfig cfg;
    };
    std::vector<Run> runs;
    for (const char* m : {"bce", "ce"}) {
        Run r{"loss", m, base};
        r.cfg.loss.mode = m;
        runs.push_back(r);
    }
    for (double tau : {0.1, 0.3, 0.5}) {
        Run r{"tau", "tau_" + std::to_string(tau).substr(0, 3), base};
        r.cfg.model.tau = tau;
        runs.push_back(r);
    }
    const std::vector<std::pair<std::string, std::vector<double>>> ratio_sets = {
        {"ratios_1", {1.0}}, {"ratios_3", {1.0, 4.0, 0.25}}, {"ratios_full", {1.0, 2.0, 4.0, 0.5, 0.25}}};
    for (const auto& [name, seeds] : ratio_sets) {
        Run r{"ratios", name, base};
        r.cfg.model.ratio_seeds = seeds;
        runs.push_back(r);
    }

    std::ofstream csv(out_dir + "/ablate.csv");
    csv << "axis,run,mAP25,mAP50,recall25\n";
    for (const Run& r : runs) {
        ParameterStore<float> store;
        build_params(store, r.cfg.model, r.cfg.seed);
        train_run(r.cfg, scenes, store, 0, "", {});
        std::vector<std::vector<Box3D>> preds, gts;
        for (const SceneBundle& sc : scenes) {
            PreparedScene ps = prepare_scene(sc, r.cfg.model);
            preds.push_back(run_detect(store, r.cfg.model, ps, r.cfg.detect));
            gts.push_back(sc.gt_boxes);
        }
        ApResult a25 = average_precision(preds, gts, 0.25);
        ApResult a50 = average_precision(preds, gts, 0.5);
        // pooled recall at IoU 0.25 across classes
        std::int64_t matched = 0, total = 0;
        for (std::size_t s = 0; s < gts.size(); ++s) {
            std::vector<char> used(gts[s].size(), 0);
            for (const Box3D& p : preds[s]) {
                double best = 0;
                int bi = -1;
                for (std::size_t g = 0; g < gts[s].size(); ++g) {
                    if (used[g] || gts[s][g].class_id != p.class_id) continue;
                    const double v = iou3d(p, gts[s][g]);
                    if (v > best) {
                        best = v;
                        bi = int(g);
                    }
                }
                if (bi >= 0 && best >= 0.25) {
                    used[bi] = 1;
                    ++matched;
                }
            }
            total += std::int64_t(gts[s].size());
        }
        const double recall = total ? double(matched) / double(total) : 0.0;
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s,%s,%.4f,%.4f,%.4f\n", r.axis.c_str(), r.name.c_str(),
                      a25.map, a50.map, recall);
        csv << buf;
        std::printf("%s", buf);
        std::fflush(stdout);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse generative 3D object detection"};
    app.require_subcommand(1);
    std::string config_path, out, data, ckpt, input, pred, gt, resume, out_csv;
    std::vector<std::string> sets;
    std::vector<double> ious = {0.25, 0.5};
    int n_scenes = 20, steps = 5;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON run config (defaults when omitted)");
        sub->add_option("--set", sets, "dotted.path=value override, repeatable");
    };

    auto* synth = app.add_subcommand("synth", "generate synthetic scenes");
    add_common(synth);
    synth->add_option("--out", out, "output dataset directory")->required();
    synth->add_option("--scenes", n_scenes, "scene count");

    auto* train = app.add_subcommand("train", "train on a scene directory");
    add_common(train);
    train->add_option("--data", data, "dataset directory")->required();
    train->add_option("--out", out, "run output directory")->required();
    train->add_option("--resume", resume, "checkpoint to resume from");

    auto* detect = app.add_subcommand("detect", "run detection on one scene");
    add_common(detect);
    detect->add_option("--ckpt", ckpt, "checkpoint path")->required();
    detect->add_option("--input", input, "scene directory")->required();
    detect->add_option("--out", out, "detections JSON path")->required();

    auto* evalc = app.add_subcommand("eval", "score predictions against ground truth");
    evalc->add_option("--pred", pred, "det.json or prediction directory")->required();
    evalc->add_option("--gt", gt, "boxes.json or dataset directory")->required();
    evalc->add_option("--iou", ious, "IoU thresholds");
    evalc->add_option("--out", out, "report directory")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check, float64");
    add_common(gradcheck);

    auto* bench = app.add_subcommand("bench", "runtime/memory scaling ladder");
    add_common(bench);
    bench->add_option("--out", out_csv, "bench.csv path");
    bench->add_option("--steps", steps, "ladder steps (nnz doubles per step)");

    auto* ablate = app.add_subcommand("ablate", "per-axis ablation grid");
    add_common(ablate);
    ablate->add_option("--data", data, "dataset directory")->required();
    ablate->add_option("--out", out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (synth->parsed()) return cmd_synth(resolve_config(config_path, sets), out, n_scenes);
        if (train->parsed()) return cmd_train(resolve_config(config_path, sets), data, out, resume);
        if (detect->parsed()) return cmd_detect(ckpt, input, out, sets);
        if (evalc->parsed()) return cmd_eval(pred, gt, ious, out);
        if (gradcheck->parsed()) return cmd_gradcheck(resolve_config(config_path, sets));
        if (bench->parsed()) return cmd_bench(resolve_config(config_path, sets), out_csv, steps);
        if (ablate->parsed()) return cmd_ablate(resolve_config(config_path, sets), data, out);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
    return 0;
}
