#pragma once
// Training loop and single-scene inference driver shared by the CLI and the
// end-to-end tests.

#include <functional>
#include <string>
#include <vector>

#include "gsdn/config.hpp"
#include "gsdn/data.hpp"

namespace gsdn {

struct TrainLogRow {
    std::int64_t iter = 0;
    double lr = 0;
    LossBreakdown loss;
};

struct PreparedScene {
    SparseTensorF input;  // occupancy features, stride 1
    std::vector<Box3D> gt;
    std::vector<std::unordered_set<std::uint64_t>> forced;
    std::int64_t n_points = 0;
    std::string name;
};

PreparedScene prepare_scene(const SceneBundle& bundle, const ModelConfig& cfg,
                            const std::string& name = "");

struct TrainResult {
    std::vector<TrainLogRow> log;  // first iteration, every log_every, last
    std::int64_t iterations = 0;
};

// Runs cfg.train.iterations steps (scene i = iter mod N), teacher-forced
// pruning, SGD with the exponential schedule. out_dir may be empty (no files);
// otherwise writes train_log.csv and ckpt.bin (+ periodic ckpt_<iter>.bin).
TrainResult train_run(const RunConfig& cfg, const std::vector<SceneBundle>& scenes,
                      ParameterStore<float>& store, std::int64_t start_iter,
                      const std::string& out_dir,
                      const std::function<void(const TrainLogRow&)>& on_log = {});

struct DetectStats {
    std::vector<std::int64_t> level_nnz;  // pre-prune support per level 1..L
    std::int64_t input_nnz = 0, points = 0;
    double forward_ms = 0, post_ms = 0;
    std::int64_t peak_bytes = 0;  // MemGauge growth during forward
};

// Eval-mode forward + decode + NMS on one prepared scene.
std::vector<Box3D> run_detect(ParameterStore<float>& store, const ModelConfig& cfg,
                              const PreparedScene& scene, const DetectConfig& dcfg,
                              DetectStats* stats = nullptr);

}  // namespace gsdn
