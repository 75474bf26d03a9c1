#include "gsdn/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "gsdn/common.hpp"

namespace gsdn {

namespace {

struct Scored {
    double score;
    int scene, idx;  // prediction identity
};

// Per-class TP flags in score order; shared by AP and PR computation.
struct ClassRuns {
    std::vector<Scored> order;   // score desc
    std::vector<char> tp;        // parallel to order
    std::int64_t n_gt = 0;
};

ClassRuns match_class(const std::vector<std::vector<Box3D>>& preds,
                      const std::vector<std::vector<Box3D>>& gts, double iou_thresh, int cls) {
    ClassRuns cr;
    for (std::size_t s = 0; s < preds.size(); ++s)
        for (std::size_t i = 0; i < preds[s].size(); ++i)
            if (preds[s][i].class_id == cls) cr.order.push_back({preds[s][i].score, int(s), int(i)});
    std::stable_sort(cr.order.begin(), cr.order.end(),
                     [](const Scored& a, const Scored& b) { return a.score > b.score; });
    std::vector<std::vector<int>> gt_rows(gts.size());
    for (std::size_t s = 0; s < gts.size(); ++s)
        for (std::size_t i = 0; i < gts[s].size(); ++i)
            if (gts[s][i].class_id == cls) {
                gt_rows[s].push_back(int(i));
                ++cr.n_gt;
            }
    std::vector<std::set<int>> used(gts.size());
    cr.tp.assign(cr.order.size(), 0);
    for (std::size_t k = 0; k < cr.order.size(); ++k) {
        const Scored& p = cr.order[k];
        const Box3D& pb = preds[p.scene][p.idx];
        double best = 0;
        int best_gt = -1;
        for (int gi : gt_rows[p.scene]) {
            if (used[p.scene].count(gi)) continue;
            const double v = iou3d(pb, gts[p.scene][gi]);
            if (v > best) {
                best = v;
                best_gt = gi;
            }
        }
        if (best_gt >= 0 && best >= iou_thresh) {
            cr.tp[k] = 1;
            used[p.scene].insert(best_gt);
        }
    }
    return cr;
}

double area_under_envelope(const std::vector<char>& tp, std::int64_t n_gt) {
    if (n_gt == 0) return 0.0;
    std::vector<double> prec, rec;
    std::int64_t ctp = 0;
    for (std::size_t k = 0; k < tp.size(); ++k) {
        ctp += tp[k];
        prec.push_back(double(ctp) / double(k + 1));
        rec.push_back(double(ctp) / double(n_gt));
    }
    // precision envelope from the right, exact area over recall
    double ap = 0, prev_r = 0, env = 0;
    std::vector<double> env_at(prec.size());
    for (std::size_t k = prec.size(); k-- > 0;) {
        env = std::max(env, prec[k]);
        env_at[k] = env;
    }
    for (std::size_t k = 0; k < prec.size(); ++k) {
        ap += (rec[k] - prev_r) * env_at[k];
        prev_r = rec[k];
    }
    return ap;
}

}  // namespace

ApResult average_precision(const std::vector<std::vector<Box3D>>& preds,
                           const std::vector<std::vector<Box3D>>& gts, double iou_thresh) {
    if (preds.size() != gts.size())
        throw ContractError("average_precision: scene count mismatch");
    std::set<int> classes;
    for (const auto& scene : gts)
        for (const Box3D& g : scene) classes.insert(g.class_id);
    ApResult res;
    for (int cls : classes) {
        ClassRuns cr = match_class(preds, gts, iou_thresh, cls);
        res.per_class[cls] = area_under_envelope(cr.tp, cr.n_gt);
    }
    if (!res.per_class.empty()) {
        double s = 0;
        for (const auto& [c, ap] : res.per_class) s += ap;
        res.map = s / double(res.per_class.size());
    }
    return res;
}

std::vector<PrSample> pr_curve(const std::vector<std::vector<Box3D>>& preds,
                               const std::vector<std::vector<Box3D>>& gts, double iou_thresh,
                               int cls) {
    ClassRuns cr = match_class(preds, gts, iou_thresh, cls);
    std::vector<PrSample> out;
    std::int64_t ctp = 0;
    for (std::size_t k = 0; k < cr.order.size(); ++k) {
        ctp += cr.tp[k];
        out.push_back({cr.order[k].score, double(ctp) / double(k + 1),
                       cr.n_gt ? double(ctp) / double(cr.n_gt) : 0.0});
    }
    return out;
}

void write_pr_csv(const std::vector<PrSample>& samples, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f << "score,precision,recall\n";
    char buf[128];
    for (const PrSample& s : samples) {
        std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g\n", s.score, s.precision, s.recall);
        f << buf;
    }
}

void write_bench_csv(const std::vector<BenchRow>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f << "scene,points,nnz,forward_ms,post_ms,peak_mb\n";
    char buf[256];
    for (const BenchRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%lld,%lld,%.3f,%.3f,%.3f\n", r.scene.c_str(),
                      (long long)r.points, (long long)r.nnz, r.forward_ms, r.post_ms, r.peak_mb);
        f << buf;
    }
}

LinFit least_squares(const std::vector<double>& xs, const std::vector<double>& ys) {
    LinFit fit;
    const std::size_t n = xs.size();
    if (n < 2 || ys.size() != n) return fit;
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / double(n);
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / double(n);
    double sxx = 0, sxy = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    if (sxx == 0) return fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    fit.r2 = syy == 0 ? 1.0 : (sxy * sxy) / (sxx * syy);
    return fit;
}

}  // namespace gsdn
