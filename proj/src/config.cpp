#include "gsdn/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

using nlohmann::json;

namespace gsdn {

static json to_json(const RunConfig& c) {
    json synth_classes = json::array();
    for (const auto& r : c.synth.class_sizes)
        synth_classes.push_back({{"lo", {r.lo[0], r.lo[1], r.lo[2]}},
                                 {"hi", {r.hi[0], r.hi[1], r.hi[2]}}});
    return json{
        {"seed", c.seed},
        {"model",
         {{"levels", c.model.levels},
          {"in_channels", c.model.in_channels},
          {"base_channels", c.model.base_channels},
          {"backbone", c.model.backbone},
          {"classes", c.model.classes},
          {"tau", c.model.tau},
          {"voxel_size", c.model.voxel_size},
          {"anchor_scale", c.model.anchor_scale},
          {"ratio_seeds", c.model.ratio_seeds}}},
        {"optimizer",
         {{"base_lr", c.optimizer.base_lr},
          {"final_lr", c.optimizer.final_lr},
          {"total_iters", c.optimizer.total_iters},
          {"momentum", c.optimizer.momentum},
          {"weight_decay", c.optimizer.weight_decay}}},
        {"loss",
         {{"mode", c.loss.mode},
          {"lambda_s", c.loss.weights.s},
          {"lambda_anc", c.loss.weights.anc},
          {"lambda_class", c.loss.weights.cls},
          {"lambda_reg", c.loss.weights.reg}}},
        {"synth",
         {{"room", {c.synth.room[0], c.synth.room[1], c.synth.room[2]}},
          {"min_objects", c.synth.min_objects},
          {"max_objects", c.synth.max_objects},
          {"density", c.synth.density},
          {"noise_sigma", c.synth.noise_sigma},
          {"class_sizes", synth_classes}}},
        {"train",
         {{"iterations", c.train.iterations},
          {"checkpoint_every", c.train.checkpoint_every},
          {"log_every", c.train.log_every}}},
        {"detect", {{"score_thresh", c.detect.score_thresh}, {"nms_iou", c.detect.nms_iou}}},
        {"eval", {{"iou_thresholds", c.eval.iou_thresholds}}},
    };
}

static RunConfig from_json(const json& j) {
    RunConfig c;
    try {
        c.seed = j.at("seed").get<std::uint64_t>();
        const json& m = j.at("model");
        c.model.levels = m.at("levels").get<int>();
        c.model.in_channels = m.at("in_channels").get<int>();
        c.model.base_channels = m.at("base_channels").get<int>();
        c.model.backbone = m.at("backbone").get<std::string>();
        c.model.classes = m.at("classes").get<int>();
        c.model.tau = m.at("tau").get<double>();
        c.model.voxel_size = m.at("voxel_size").get<double>();
        c.model.anchor_scale = m.at("anchor_scale").get<double>();
        c.model.ratio_seeds = m.at("ratio_seeds").get<std::vector<double>>();
        const json& o = j.at("optimizer");
        c.optimizer.base_lr = o.at("base_lr").get<double>();
        c.optimizer.final_lr = o.at("final_lr").get<double>();
        c.optimizer.total_iters = o.at("total_iters").get<std::int64_t>();
        c.optimizer.momentum = o.at("momentum").get<double>();
        c.optimizer.weight_decay = o.at("weight_decay").get<double>();
        const json& l = j.at("loss");
        c.loss.mode = l.at("mode").get<std::string>();
        c.loss.weights.s = l.at("lambda_s").get<double>();
        c.loss.weights.anc = l.at("lambda_anc").get<double>();
        c.loss.weights.cls = l.at("lambda_class").get<double>();
        c.loss.weights.reg = l.at("lambda_reg").get<double>();
        const json& s = j.at("synth");
        for (int d = 0; d < 3; ++d) c.synth.room[d] = s.at("room").at(d).get<double>();
        c.synth.min_objects = s.at("min_objects").get<int>();
        c.synth.max_objects = s.at("max_objects").get<int>();
        c.synth.density = s.at("density").get<double>();
        c.synth.noise_sigma = s.at("noise_sigma").get<double>();
        c.synth.class_sizes.clear();
        for (const auto& e : s.at("class_sizes")) {
            ClassSizeRange r;
            for (int d = 0; d < 3; ++d) {
                r.lo[d] = e.at("lo").at(d).get<double>();
                r.hi[d] = e.at("hi").at(d).get<double>();
            }
            c.synth.class_sizes.push_back(r);
        }
        const json& t = j.at("train");
        c.train.iterations = t.at("iterations").get<std::int64_t>();
        c.train.checkpoint_every = t.at("checkpoint_every").get<std::int64_t>();
        c.train.log_every = t.at("log_every").get<std::int64_t>();
        const json& d = j.at("detect");
        c.detect.score_thresh = d.at("score_thresh").get<double>();
        c.detect.nms_iou = d.at("nms_iou").get<double>();
        c.eval.iou_thresholds = j.at("eval").at("iou_thresholds").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

void RunConfig::validate() const {
    model.validate();
    if (optimizer.base_lr <= 0 || optimizer.final_lr <= 0)
        throw ConfigError("learning rates must be positive");
    if (optimizer.final_lr > optimizer.base_lr)
        throw ConfigError("final_lr must not exceed base_lr");
    if (optimizer.total_iters < 0) throw ConfigError("total_iters must be >= 0");
    if (train.iterations < 0) throw ConfigError("train.iterations must be >= 0");
    if (train.checkpoint_every < 1 || train.log_every < 1)
        throw ConfigError("checkpoint_every and log_every must be >= 1");
    loss_mode();
    if (loss.weights.s < 0 || loss.weights.anc < 0 || loss.weights.cls < 0 || loss.weights.reg < 0)
        throw ConfigError("loss weights must be >= 0");
    if (synth.min_objects < 0 || synth.max_objects < synth.min_objects)
        throw ConfigError("object count range invalid");
    if (synth.density <= 0) throw ConfigError("synth.density must be > 0");
    if (synth.noise_sigma < 0) throw ConfigError("synth.noise_sigma must be >= 0");
    if (int(synth.class_sizes.size()) != model.classes)
        throw ConfigError("synth.class_sizes count must equal model.classes");
    if (detect.score_thresh < 0 || detect.score_thresh > 1)
        throw ConfigError("detect.score_thresh must be in [0,1]");
    if (detect.nms_iou <= 0 || detect.nms_iou >= 1)
        throw ConfigError("detect.nms_iou must be in (0,1)");
    if (eval.iou_thresholds.empty()) throw ConfigError("eval.iou_thresholds must be non-empty");
}

RunConfig default_run_config() { return RunConfig{}; }

// Every key path in `doc` must exist in `schema` (the default-config JSON).
// Array elements are checked against the schema array's first element.
static void reject_unknown(const json& doc, const json& schema, const std::string& path) {
    if (doc.is_array() && schema.is_array() && !schema.empty()) {
        for (std::size_t i = 0; i < doc.size(); ++i)
            reject_unknown(doc[i], schema[0], path + "[" + std::to_string(i) + "]");
        return;
    }
    if (!doc.is_object()) return;
    if (!schema.is_object())
        throw ConfigError("config: unexpected object at " + (path.empty() ? "<root>" : path));
    for (const auto& [key, val] : doc.items()) {
        const std::string p = path.empty() ? key : path + "." + key;
        if (!schema.contains(key)) throw ConfigError("config: unknown key " + p);
        reject_unknown(val, schema[key], p);
    }
}

static void apply_override(json& doc, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override must look like dotted.path=value: " + spec);
    const std::string path = spec.substr(0, eq), text = spec.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;  // bare strings allowed without quotes
    }
    json* cur = &doc;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    if (parts.empty()) throw ConfigError("override has empty path: " + spec);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!cur->contains(parts[i])) throw ConfigError("config: unknown key " + path);
        cur = &(*cur)[parts[i]];
    }
    if (!cur->contains(parts.back())) throw ConfigError("config: unknown key " + path);
    (*cur)[parts.back()] = value;
}

RunConfig run_config_from_text(const std::string& text, const std::vector<std::string>& overrides) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    const json schema = to_json(default_run_config());
    reject_unknown(doc, schema, "");
    // overlay onto defaults so partial configs work
    json merged = schema;
    merged.merge_patch(doc);
    for (const std::string& o : overrides) apply_override(merged, o);
    return from_json(merged);
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return run_config_from_text(ss.str(), overrides);
}

std::string run_config_to_json(const RunConfig& cfg) { return to_json(cfg).dump(2); }

}  // namespace gsdn
