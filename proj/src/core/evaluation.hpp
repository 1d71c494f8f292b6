#pragma once

#include <map>
#include <string>
#include <vector>

#include "core/detector.hpp"
#include "core/regions.hpp"

namespace locov::eval {

struct GroundTruthBox {
  regions::Box box;
  std::size_t class_id = 0;
};

// Per-image inputs: predicted detections (one list per image) against
// annotated boxes (same indexing).
struct ImageDetections {
  std::vector<det::Detection> detections;
};
struct ImageGroundTruth {
  std::vector<GroundTruthBox> boxes;
};

// The ten COCO-style IoU thresholds 0.5:0.05:0.95.
const std::vector<double>& iou_thresholds();

// Average precision of one class at one IoU threshold across a split.
// Detections are ranked by confidence (ties by image then input order) and
// matched greedily to the best unmatched annotation at or above the
// threshold. The score is the area under the exact precision envelope:
// sum over recall steps of max precision at recall >= that step, / #GT.
double average_precision(const std::vector<ImageDetections>& dets,
                         const std::vector<ImageGroundTruth>& gts, std::size_t class_id,
                         double iou_threshold);

struct ClassScores {
  double ap = 0.0;    // mean over the ten thresholds
  double ap50 = 0.0;
  double ap75 = 0.0;
  std::vector<double> per_threshold;
  std::size_t gt_count = 0;
};

struct SetupScores {
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  std::map<std::string, ClassScores> per_class;  // classes present in GT only
};

struct EvalReport {
  std::vector<double> thresholds;
  std::map<std::string, SetupScores> setups;            // "novel", "known", "generalized"
  std::map<std::string, double> generalized_delta_ap50;  // generalized - individual setup

  std::string to_json() const;  // fixed key order
  std::string to_csv() const;
};

// Scores each setup's detections against the annotations restricted to that
// setup's classes. Detection sets must be tagged with the matching setup.
EvalReport evaluate(const std::map<std::string, std::vector<det::DetectionSet>>& dets_per_setup,
                    const std::vector<ImageGroundTruth>& gts, const det::ClassCatalog& catalog);

}  // namespace locov::eval
