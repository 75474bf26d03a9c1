#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gsdn/config.hpp"

using namespace gsdn;

TEST_CASE("defaults match the published training recipe") {
    RunConfig c = default_run_config();
    CHECK(c.optimizer.base_lr == 0.1);
    CHECK(c.optimizer.final_lr == 1e-3);
    CHECK(c.optimizer.momentum == 0.9);
    CHECK(c.optimizer.weight_decay == 1e-4);
    CHECK(c.model.levels == 4);
    CHECK(c.model.tau == 0.3);
    CHECK(c.model.voxel_size == 0.05);
    CHECK(c.detect.nms_iou == 0.2);
    CHECK(c.loss.weights.s == 1.0);
    CHECK(c.loss.weights.anc == 1.0);
    CHECK(c.loss.weights.cls == 1.0);
    CHECK(c.loss.weights.reg == 0.1);
    CHECK(c.loss.mode == "bce");
    CHECK(c.model.ratio_seeds == std::vector<double>{1.0, 2.0, 4.0, 0.5, 0.25});
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("json round trip preserves the config") {
    RunConfig c = default_run_config();
    c.seed = 77;
    c.model.base_channels = 16;
    c.model.backbone = "res18";
    c.synth.noise_sigma = 0.01;
    RunConfig back = run_config_from_text(run_config_to_json(c));
    CHECK(run_config_to_json(back) == run_config_to_json(c));
}

TEST_CASE("partial configs overlay onto defaults") {
    RunConfig c = run_config_from_text(R"({"model": {"base_channels": 8}})");
    CHECK(c.model.base_channels == 8);
    CHECK(c.model.levels == 4);          // untouched default
    CHECK(c.optimizer.base_lr == 0.1);   // untouched section
}

TEST_CASE("unknown keys are rejected with their path") {
    CHECK_THROWS_WITH_AS(run_config_from_text(R"({"modle": {}})"),
                         doctest::Contains("modle"), ConfigError);
    CHECK_THROWS_WITH_AS(run_config_from_text(R"({"model": {"depth": 4}})"),
                         doctest::Contains("model.depth"), ConfigError);
    // array elements are validated against the schema element
    CHECK_THROWS_WITH_AS(
        run_config_from_text(
            R"({"synth": {"class_sizes": [{"lo": [1,1,1], "high": [2,2,2]}]}})"),
        doctest::Contains("high"), ConfigError);
}

TEST_CASE("malformed json raises ConfigError") {
    CHECK_THROWS_AS(run_config_from_text("{"), ConfigError);
    CHECK_THROWS_AS(run_config_from_text(R"({"seed": "abc"})"), ConfigError);
    CHECK_THROWS_AS(load_run_config("/nonexistent/cfg.json"), ConfigError);
}

TEST_CASE("dotted overrides") {
    RunConfig c = run_config_from_text("{}", {"model.tau=0.5", "train.iterations=42",
                                              "model.backbone=res34",
                                              "model.ratio_seeds=[1.0,2.0]"});
    CHECK(c.model.tau == 0.5);
    CHECK(c.train.iterations == 42);
    CHECK(c.model.backbone == "res34");  // bare string, no quotes needed
    CHECK(c.model.ratio_seeds == std::vector<double>{1.0, 2.0});

    CHECK_THROWS_AS(run_config_from_text("{}", {"model.nope=1"}), ConfigError);
    CHECK_THROWS_AS(run_config_from_text("{}", {"model.tau"}), ConfigError);
}

TEST_CASE("semantic validation") {
    CHECK_THROWS_AS(run_config_from_text(R"({"optimizer": {"base_lr": -1}})"), ConfigError);
    CHECK_THROWS_AS(run_config_from_text(R"({"optimizer": {"final_lr": 0.5}})"),
                    ConfigError);  // final above base
    CHECK_THROWS_AS(run_config_from_text(R"({"model": {"tau": 1.5}})"), ConfigError);
    CHECK_THROWS_AS(run_config_from_text(R"({"loss": {"mode": "focal"}})"), ConfigError);
    CHECK_THROWS_AS(run_config_from_text(R"({"synth": {"density": 0}})"), ConfigError);
    CHECK_THROWS_AS(run_config_from_text(R"({"detect": {"nms_iou": 1.0}})"), ConfigError);
    CHECK_THROWS_AS(run_config_from_text(R"({"eval": {"iou_thresholds": []}})"), ConfigError);
    // class count must stay in sync with the synthetic class table
    CHECK_THROWS_AS(run_config_from_text(R"({"model": {"classes": 4}})"), ConfigError);
}

TEST_CASE("schedule_iters falls back to train.iterations") {
    RunConfig c = default_run_config();
    c.optimizer.total_iters = 0;
    c.train.iterations = 123;
    CHECK(c.schedule_iters() == 123);
    c.optimizer.total_iters = 900;
    CHECK(c.schedule_iters() == 900);
}

TEST_CASE("loss mode mapping") {
    RunConfig c = default_run_config();
    c.loss.mode = "bce";
    CHECK(c.loss_mode() == LossMode::balanced);
    c.loss.mode = "ce";
    CHECK(c.loss_mode() == LossMode::plain);
    c.loss.mode = "hinge";
    CHECK_THROWS_AS(c.loss_mode(), ConfigError);
}
