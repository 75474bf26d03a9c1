#pragma once
// Detection metrics (AP / mAP / PR curves) and benchmark fit helpers.

#include <map>
#include <string>
#include <vector>

#include "gsdn/detect.hpp"

namespace gsdn {

struct ApResult {
    std::map<int, double> per_class;  // only classes with >= 1 ground truth
    double map = 0.0;
};

// Greedy highest-IoU matching with single-use ground truths, predictions
// sorted by score (ties: input order); AP by exact area under the precision
// envelope. Scenes are matched independently.
ApResult average_precision(const std::vector<std::vector<Box3D>>& preds,
                           const std::vector<std::vector<Box3D>>& gts, double iou_thresh);

inline ApResult average_precision(const std::vector<Box3D>& preds, const std::vector<Box3D>& gts,
                                  double iou_thresh) {
    return average_precision(std::vector<std::vector<Box3D>>{preds},
                             std::vector<std::vector<Box3D>>{gts}, iou_thresh);
}

struct PrSample {
    double score, precision, recall;
};

// One sample per score cut for a single class.
std::vector<PrSample> pr_curve(const std::vector<std::vector<Box3D>>& preds,
                               const std::vector<std::vector<Box3D>>& gts, double iou_thresh,
                               int cls);

void write_pr_csv(const std::vector<PrSample>& samples, const std::string& path);

struct BenchRow {
    std::string scene;
    std::int64_t points = 0, nnz = 0;
    double forward_ms = 0, post_ms = 0, peak_mb = 0;
};

void write_bench_csv(const std::vector<BenchRow>& rows, const std::string& path);

struct LinFit {
    double slope = 0, intercept = 0, r2 = 0;
};

LinFit least_squares(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace gsdn
