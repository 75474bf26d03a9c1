#pragma once
// Scene ingestion (ASCII PLY + labels), synthetic scene generation, ground
// truth derivation, and checkpoint persistence.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gsdn/autograd.hpp"
#include "gsdn/detect.hpp"
#include "gsdn/model.hpp"

namespace gsdn {

struct SceneBundle {
    std::vector<std::array<double, 3>> points;   // meters
    std::vector<std::array<float, 3>> colors;    // [0,1]; empty when absent
    std::vector<int> semantic_id, instance_id;   // -1 = unlabeled; empty when absent
    std::vector<Box3D> gt_boxes;
};

struct ClassSizeRange {
    std::array<double, 3> lo, hi;  // per-axis extent range, meters
};

struct SynthSpec {
    std::array<double, 3> room = {3.2, 3.2, 1.2};
    int min_objects = 4, max_objects = 7;
    double density = 250.0;       // surface points per square meter
    double noise_sigma = 0.005;   // meters
    std::uint64_t seed = 1;
    // table, chair, sofa, bookcase, board. Each range sits within ~12% of an
    // anchor shape at level 1 or 2 (flat, cube, big cube, tall, thin panel) so
    // every sampled box clears the 0.35 IoU match threshold at any lattice
    // offset; sizes halfway between anchor scales are unmatchable by design.
    std::vector<ClassSizeRange> class_sizes = {
        {{0.46, 0.46, 0.23}, {0.56, 0.56, 0.28}},
        {{0.36, 0.36, 0.36}, {0.44, 0.44, 0.44}},
        {{0.72, 0.72, 0.72}, {0.88, 0.88, 0.88}},
        {{0.29, 0.29, 0.57}, {0.35, 0.35, 0.70}},
        {{0.57, 0.145, 0.57}, {0.70, 0.175, 0.70}},
    };
};

// points.ply (+ labels.txt, boxes.json when present) under `dir`.
SceneBundle load_scene(const std::string& dir);
void save_scene(const SceneBundle& bundle, const std::string& dir);

std::vector<Box3D> load_boxes(const std::string& path);
void save_boxes(const std::vector<Box3D>& boxes, const std::string& path);

// Per labeled instance: tight min/max box (size floor 1e-3 m), majority class.
std::vector<Box3D> gt_boxes_from_instances(const SceneBundle& bundle);

// Cuboids on a floor plane, points sampled on faces only, floor/wall clutter
// labeled background, Gaussian noise. Deterministic per spec.seed.
SceneBundle synth_scene(const SynthSpec& spec);

// Checkpoint: "GSDN" magic, version, config echo, iteration, named float32
// arrays (parameters, momentum, running stats), little-endian.
void save_checkpoint(const ParameterStore<float>& store, const ModelConfig& cfg,
                     std::int64_t iter, const std::string& path);
std::int64_t load_checkpoint(ParameterStore<float>& store, ModelConfig& cfg,
                             const std::string& path);

// ModelConfig <-> JSON (shared by checkpoints and the CLI config).
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace gsdn
