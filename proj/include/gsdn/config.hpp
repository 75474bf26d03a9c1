#pragma once
// Run configuration: one JSON document covering every module, with strict
// unknown-key rejection and dotted-path overrides.

#include <string>
#include <vector>

#include "gsdn/autograd.hpp"
#include "gsdn/data.hpp"
#include "gsdn/model.hpp"

namespace gsdn {

struct TrainConfig {
    std::int64_t iterations = 5000;
    std::int64_t checkpoint_every = 1000;
    std::int64_t log_every = 50;
};

struct DetectConfig {
    double score_thresh = 0.05;
    double nms_iou = 0.2;
};

struct EvalConfig {
    std::vector<double> iou_thresholds = {0.25, 0.5};
};

struct LossConfig {
    std::string mode = "bce";  // bce | ce (Table-S1-style ablation switch)
    LossWeights weights;
};

struct RunConfig {
    std::uint64_t seed = 1;
    ModelConfig model;
    OptimizerConfig optimizer;  // total_iters 0 means "use train.iterations"
    LossConfig loss;
    SynthSpec synth;
    TrainConfig train;
    DetectConfig detect;
    EvalConfig eval;

    std::int64_t schedule_iters() const {
        return optimizer.total_iters > 0 ? optimizer.total_iters : train.iterations;
    }
    LossMode loss_mode() const {
        if (loss.mode == "bce") return LossMode::balanced;
        if (loss.mode == "ce") return LossMode::plain;
        throw ConfigError("loss.mode must be 'bce' or 'ce'");
    }
    void validate() const;
};

RunConfig default_run_config();

// Parses JSON text; every key must exist in the default document (unknown keys
// rejected with the offending path). Overrides are "dotted.path=json_value".
RunConfig run_config_from_text(const std::string& text,
                               const std::vector<std::string>& overrides = {});
RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides = {});
std::string run_config_to_json(const RunConfig& cfg);

}  // namespace gsdn
