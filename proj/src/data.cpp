#include "gsdn/data.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace gsdn {

// --- PLY ---------------------------------------------------------------------

static std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

static void write_ply(const SceneBundle& b, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    const bool rgb = !b.colors.empty();
    f << "ply\nformat ascii 1.0\nelement vertex " << b.points.size() << "\n";
    f << "property double x\nproperty double y\nproperty double z\n";
    if (rgb) f << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    f << "end_header\n";
    for (std::size_t i = 0; i < b.points.size(); ++i) {
        f << fmt_double(b.points[i][0]) << ' ' << fmt_double(b.points[i][1]) << ' '
          << fmt_double(b.points[i][2]);
        if (rgb)
            for (int c = 0; c < 3; ++c)
                f << ' ' << int(std::lround(std::clamp(b.colors[i][c], 0.f, 1.f) * 255.f));
        f << '\n';
    }
}

static void read_ply(SceneBundle& b, const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path);
    std::string line;
    int lineno = 0;
    auto next = [&]() {
        if (!std::getline(f, line)) throw DataError(path + ": truncated header at line " + std::to_string(lineno));
        ++lineno;
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    };
    next();
    if (line != "ply") throw DataError(path + ":1: not a PLY file");
    next();
    if (line != "format ascii 1.0") throw DataError(path + ":2: only ascii 1.0 supported");
    std::size_t n = 0;
    std::vector<std::string> props;
    while (true) {
        next();
        std::istringstream ss(line);
        std::string tok;
        ss >> tok;
        if (tok == "comment") continue;
        if (tok == "element") {
            std::string name;
            ss >> name >> n;
            if (name != "vertex")
                throw DataError(path + ":" + std::to_string(lineno) + ": unsupported element " + name);
        } else if (tok == "property") {
            std::string type, name;
            ss >> type >> name;
            props.push_back(name);
        } else if (tok == "end_header") {
            break;
        } else {
            throw DataError(path + ":" + std::to_string(lineno) + ": unexpected header token " + tok);
        }
    }
    const std::vector<std::string> xyz = {"x", "y", "z"};
    const std::vector<std::string> xyzrgb = {"x", "y", "z", "red", "green", "blue"};
    bool rgb;
    if (props == xyz)
        rgb = false;
    else if (props == xyzrgb)
        rgb = true;
    else
        throw DataError(path + ": unsupported property layout (want x y z [red green blue])");
    b.points.reserve(n);
    if (rgb) b.colors.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        next();
        std::istringstream ss(line);
        std::array<double, 3> p;
        if (!(ss >> p[0] >> p[1] >> p[2]))
            throw DataError(path + ":" + std::to_string(lineno) + ": malformed vertex");
        b.points.push_back(p);
        if (rgb) {
            int r, g, bl;
            if (!(ss >> r >> g >> bl))
                throw DataError(path + ":" + std::to_string(lineno) + ": malformed color");
            b.colors.push_back({float(r) / 255.f, float(g) / 255.f, float(bl) / 255.f});
        }
    }
}

// --- labels / boxes -----------------------------------------------------------

static void read_labels(SceneBundle& b, const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        int sem, inst;
        if (!(ss >> sem >> inst))
            throw DataError(path + ":" + std::to_string(lineno) + ": want 'semantic_id instance_id'");
        b.semantic_id.push_back(sem);
        b.instance_id.push_back(inst);
    }
    if (b.semantic_id.size() != b.points.size())
        throw DataError(path + ": " + std::to_string(b.semantic_id.size()) + " labels for " +
                        std::to_string(b.points.size()) + " points");
}

std::vector<Box3D> load_boxes(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
    if (!j.is_array()) throw DataError(path + ": expected a JSON array of boxes");
    std::vector<Box3D> out;
    for (const auto& e : j) {
        Box3D b;
        b.class_id = e.at("class_id").get<int>();
        for (int d = 0; d < 3; ++d) {
            b.center[d] = e.at("center").at(d).get<double>();
            b.size[d] = e.at("size").at(d).get<double>();
            if (b.size[d] <= 0) throw DataError(path + ": non-positive box size");
        }
        b.score = e.value("score", 1.0);
        out.push_back(b);
    }
    return out;
}

void save_boxes(const std::vector<Box3D>& boxes, const std::string& path) {
    json j = json::array();
    for (const Box3D& b : boxes)
        j.push_back({{"class_id", b.class_id},
                     {"center", {b.center[0], b.center[1], b.center[2]}},
                     {"size", {b.size[0], b.size[1], b.size[2]}},
                     {"score", b.score}});
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f << j.dump(2) << '\n';
}

SceneBundle load_scene(const std::string& dir) {
    SceneBundle b;
    read_ply(b, dir + "/points.ply");
    if (fs::exists(dir + "/labels.txt")) {
        read_labels(b, dir + "/labels.txt");
        b.gt_boxes = gt_boxes_from_instances(b);
    }
    return b;
}

void save_scene(const SceneBundle& b, const std::string& dir) {
    fs::create_directories(dir);
    write_ply(b, dir + "/points.ply");
    if (!b.semantic_id.empty()) {
        std::ofstream f(dir + "/labels.txt");
        if (!f) throw DataError("cannot write " + dir + "/labels.txt");
        for (std::size_t i = 0; i < b.semantic_id.size(); ++i)
            f << b.semantic_id[i] << ' ' << b.instance_id[i] << '\n';
    }
    if (!b.gt_boxes.empty()) save_boxes(b.gt_boxes, dir + "/boxes.json");
}

// --- ground truth --------------------------------------------------------------

std::vector<Box3D> gt_boxes_from_instances(const SceneBundle& b) {
    std::map<int, std::vector<int>> inst;  // ordered by instance id
    for (std::size_t i = 0; i < b.points.size(); ++i)
        if (!b.instance_id.empty() && b.instance_id[i] >= 0) inst[b.instance_id[i]].push_back(int(i));
    std::vector<Box3D> out;
    for (const auto& [id, rows] : inst) {
        std::array<double, 3> lo = b.points[rows[0]], hi = b.points[rows[0]];
        std::map<int, int> votes;
        for (int r : rows) {
            for (int d = 0; d < 3; ++d) {
                lo[d] = std::min(lo[d], b.points[r][d]);
                hi[d] = std::max(hi[d], b.points[r][d]);
            }
            votes[b.semantic_id[r]]++;
        }
        Box3D box;
        int best = -1;
        for (const auto& [cls, n] : votes)
            if (n > best) {
                best = n;
                box.class_id = cls;
            }
        for (int d = 0; d < 3; ++d) {
            box.center[d] = (lo[d] + hi[d]) / 2;
            box.size[d] = std::max(hi[d] - lo[d], 1e-3);
        }
        box.score = 1.0;
        out.push_back(box);
    }
    return out;
}

// --- synthetic scenes -----------------------------------------------------------

static void sample_rect(Rng& rng, std::vector<std::array<double, 3>>& pts,
                        const std::array<double, 3>& origin, int ax0, int ax1, double len0,
                        double len1, double density, double sigma) {
    const double area = len0 * len1;
    const std::int64_t n = std::max<std::int64_t>(1, std::llround(area * density));
    for (std::int64_t i = 0; i < n; ++i) {
        std::array<double, 3> p = origin;
        p[ax0] += rng.uniform() * len0;
        p[ax1] += rng.uniform() * len1;
        if (sigma > 0)
            for (int d = 0; d < 3; ++d) p[d] += rng.gaussian() * sigma;
        pts.push_back(p);
    }
}

SceneBundle synth_scene(const SynthSpec& spec) {
    if (spec.room[0] <= 0 || spec.room[1] <= 0 || spec.room[2] <= 0)
        throw ConfigError("synth: room extents must be positive");
    if (spec.density <= 0) throw ConfigError("synth: density must be positive");
    if (spec.class_sizes.empty()) throw ConfigError("synth: need at least one class");
    Rng rng(spec.seed);
    const int n_obj = spec.min_objects +
                      (spec.max_objects > spec.min_objects
                           ? int(rng.below(std::uint64_t(spec.max_objects - spec.min_objects + 1)))
                           : 0);

    // Place non-overlapping footprints (0.05 m gap), resting on the floor.
    struct Placed {
        std::array<double, 3> lo, hi;
        int cls;
    };
    std::vector<Placed> placed;
    const double gap = 0.05, margin = 0.1;
    for (int o = 0; o < n_obj; ++o) {
        const int cls = int(rng.below(std::uint64_t(spec.class_sizes.size())));
        const auto& r = spec.class_sizes[cls];
        std::array<double, 3> size;
        for (int d = 0; d < 3; ++d) size[d] = rng.uniform(r.lo[d], r.hi[d]);
        bool ok = false;
        for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
            std::array<double, 3> lo;
            for (int d = 0; d < 2; ++d)
                lo[d] = rng.uniform(margin, spec.room[d] - margin - size[d]);
            lo[2] = 0.0;
            std::array<double, 3> hi = {lo[0] + size[0], lo[1] + size[1], size[2]};
            ok = true;
            for (const Placed& p : placed) {
                bool sep = false;
                for (int d = 0; d < 2; ++d)
                    sep = sep || hi[d] + gap <= p.lo[d] || p.hi[d] + gap <= lo[d];
                if (!sep) {
                    ok = false;
                    break;
                }
            }
            if (ok) placed.push_back({lo, hi, cls});
        }
        if (!ok)
            throw DataError("synth: could not place object " + std::to_string(o) +
                            " after bounded retries (room too crowded)");
    }

    SceneBundle b;
    // Object faces.
    for (std::size_t oi = 0; oi < placed.size(); ++oi) {
        const Placed& p = placed[oi];
        const std::array<double, 3> len = {p.hi[0] - p.lo[0], p.hi[1] - p.lo[1], p.hi[2] - p.lo[2]};
        std::vector<std::array<double, 3>> pts;
        for (int face_axis = 0; face_axis < 3; ++face_axis) {
            const int a0 = (face_axis + 1) % 3, a1 = (face_axis + 2) % 3;
            for (int side = 0; side < 2; ++side) {
                if (face_axis == 2 && side == 0) continue;  // bottom face sits on the floor
                std::array<double, 3> origin = p.lo;
                origin[face_axis] = side ? p.hi[face_axis] : p.lo[face_axis];
                sample_rect(rng, pts, origin, a0, a1, len[a0], len[a1], spec.density,
                            spec.noise_sigma);
            }
        }
        for (const auto& q : pts) {
            b.points.push_back(q);
            b.semantic_id.push_back(p.cls);
            b.instance_id.push_back(int(oi));
        }
    }
    // Floor and walls, labeled background.
    std::vector<std::array<double, 3>> bg;
    sample_rect(rng, bg, {0, 0, 0}, 0, 1, spec.room[0], spec.room[1], spec.density,
                spec.noise_sigma);
    sample_rect(rng, bg, {0, 0, 0}, 0, 2, spec.room[0], spec.room[2], spec.density,
                spec.noise_sigma);
    sample_rect(rng, bg, {0, spec.room[1], 0}, 0, 2, spec.room[0], spec.room[2], spec.density,
                spec.noise_sigma);
    sample_rect(rng, bg, {0, 0, 0}, 1, 2, spec.room[1], spec.room[2], spec.density,
                spec.noise_sigma);
    sample_rect(rng, bg, {spec.room[0], 0, 0}, 1, 2, spec.room[1], spec.room[2], spec.density,
                spec.noise_sigma);
    for (const auto& q : bg) {
        b.points.push_back(q);
        b.semantic_id.push_back(-1);
        b.instance_id.push_back(-1);
    }
    b.gt_boxes = gt_boxes_from_instances(b);
    return b;
}

// --- model config JSON ----------------------------------------------------------

std::string model_config_to_json(const ModelConfig& c) {
    json j = {{"levels", c.levels},
              {"in_channels", c.in_channels},
              {"base_channels", c.base_channels},
              {"backbone", c.backbone},
              {"classes", c.classes},
              {"tau", c.tau},
              {"voxel_size", c.voxel_size},
              {"anchor_scale", c.anchor_scale},
              {"ratio_seeds", c.ratio_seeds}};
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    ModelConfig c;
    try {
        c.levels = j.at("levels").get<int>();
        c.in_channels = j.at("in_channels").get<int>();
        c.base_channels = j.at("base_channels").get<int>();
        c.backbone = j.at("backbone").get<std::string>();
        c.classes = j.at("classes").get<int>();
        c.tau = j.at("tau").get<double>();
        c.voxel_size = j.at("voxel_size").get<double>();
        c.anchor_scale = j.at("anchor_scale").get<double>();
        c.ratio_seeds = j.at("ratio_seeds").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

// --- checkpoints -----------------------------------------------------------------

static constexpr std::uint32_t kCkptVersion = 1;

static void put_u32(std::ofstream& f, std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
static void put_u64(std::ofstream& f, std::uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }

static std::uint32_t get_u32(std::ifstream& f, const std::string& path) {
    std::uint32_t v;
    if (!f.read(reinterpret_cast<char*>(&v), 4)) throw DataError(path + ": truncated checkpoint");
    return v;
}
static std::uint64_t get_u64(std::ifstream& f, const std::string& path) {
    std::uint64_t v;
    if (!f.read(reinterpret_cast<char*>(&v), 8)) throw DataError(path + ": truncated checkpoint");
    return v;
}

static void write_array(std::ofstream& f, const std::string& name, const std::vector<int>& dims,
                        const float* data, std::size_t n) {
    put_u32(f, std::uint32_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    put_u32(f, std::uint32_t(dims.size()));
    for (int d : dims) put_u32(f, std::uint32_t(d));
    f.write(reinterpret_cast<const char*>(data), std::streamsize(n * 4));
}

void save_checkpoint(const ParameterStore<float>& store, const ModelConfig& cfg,
                     std::int64_t iter, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    f.write("GSDN", 4);
    put_u32(f, kCkptVersion);
    const std::string cj = model_config_to_json(cfg);
    put_u32(f, std::uint32_t(cj.size()));
    f.write(cj.data(), std::streamsize(cj.size()));
    put_u64(f, std::uint64_t(iter));
    const std::uint32_t count =
        std::uint32_t(2 * store.params.size() + store.buffers.size());  // value + momentum
    put_u32(f, count);
    for (const auto& [name, p] : store.params) {
        write_array(f, "p." + name, p.dims, p.w.data.data(), p.w.data.size());
        write_array(f, "m." + name, p.dims, p.m.data.data(), p.m.data.size());
    }
    for (const auto& [name, buf] : store.buffers)
        write_array(f, "b." + name, {int(buf.size())}, buf.data(), buf.size());
    if (!f) throw DataError("write failure on " + path);
}

std::int64_t load_checkpoint(ParameterStore<float>& store, ModelConfig& cfg,
                             const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path);
    char magic[4];
    if (!f.read(magic, 4) || std::memcmp(magic, "GSDN", 4) != 0)
        throw DataError(path + ": bad checkpoint magic");
    const std::uint32_t ver = get_u32(f, path);
    if (ver != kCkptVersion)
        throw DataError(path + ": unsupported checkpoint version " + std::to_string(ver));
    const std::uint32_t clen = get_u32(f, path);
    std::string cj(clen, '\0');
    if (!f.read(cj.data(), clen)) throw DataError(path + ": truncated checkpoint");
    cfg = model_config_from_json(cj);
    const std::int64_t iter = std::int64_t(get_u64(f, path));

    store = ParameterStore<float>{};
    build_params(store, cfg, 0);  // shapes only; every array is overwritten below

    const std::uint32_t count = get_u32(f, path);
    std::size_t seen_params = 0, seen_buffers = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t nlen = get_u32(f, path);
        if (nlen > 4096) throw DataError(path + ": corrupt array name length");
        std::string name(nlen, '\0');
        if (!f.read(name.data(), nlen)) throw DataError(path + ": truncated checkpoint");
        const std::uint32_t rank = get_u32(f, path);
        if (rank > 8) throw DataError(path + ": corrupt rank for " + name);
        std::vector<int> dims(rank);
        std::size_t total = 1;
        for (auto& d : dims) {
            d = int(get_u32(f, path));
            total *= std::size_t(d);
        }
        if (total > (std::size_t(1) << 30)) throw DataError(path + ": dimension overflow in " + name);
        std::vector<float> vals(total);
        if (!f.read(reinterpret_cast<char*>(vals.data()), std::streamsize(total * 4)))
            throw DataError(path + ": truncated array " + name);
        if (name.rfind("p.", 0) == 0 || name.rfind("m.", 0) == 0) {
            const std::string key = name.substr(2);
            auto it = store.params.find(key);
            if (it == store.params.end()) throw DataError(path + ": unknown array " + name);
            if (it->second.dims != dims)
                throw DataError(path + ": shape mismatch for " + name + " against config");
            auto& dst = name[0] == 'p' ? it->second.w : it->second.m;
            std::copy(vals.begin(), vals.end(), dst.data.begin());
            ++seen_params;
        } else if (name.rfind("b.", 0) == 0) {
            const std::string key = name.substr(2);
            auto it = store.buffers.find(key);
            if (it == store.buffers.end()) throw DataError(path + ": unknown array " + name);
            if (it->second.size() != total)
                throw DataError(path + ": shape mismatch for " + name + " against config");
            it->second = std::move(vals);
            ++seen_buffers;
        } else {
            throw DataError(path + ": unknown array " + name);
        }
    }
    if (seen_params != 2 * store.params.size() || seen_buffers != store.buffers.size())
        throw DataError(path + ": checkpoint is missing arrays for this config");
    return iter;
}

}  // namespace gsdn
