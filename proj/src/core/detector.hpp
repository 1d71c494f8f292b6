#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "core/model.hpp"
#include "core/regions.hpp"
#include "core/tensor.hpp"

namespace locov::det {

struct ClassInfo {
  std::size_t id = 0;
  std::string name;
  std::vector<std::size_t> token_ids;
  bool known = true;
};

// All classes of a world plus their text embeddings (mean token rows).
struct ClassCatalog {
  std::vector<ClassInfo> classes;
  Tensor embeddings;  // K x D, row per class in id order

  std::vector<std::size_t> known_ids() const;
  std::vector<std::size_t> novel_ids() const;
  const ClassInfo& by_id(std::size_t id) const;

  static ClassCatalog build(const std::vector<ClassInfo>& classes, const emb::EmbeddingTable& table);
};

enum class Setup { novel, known, generalized };

std::vector<std::size_t> setup_class_ids(const ClassCatalog& catalog, Setup setup);

// Probability of each candidate class for one region row, with an implicit
// all-zeros background class completing the distribution:
// p(k) = exp(r.c_k) / (1 + sum_k' exp(r.c_k')). Returns K+1 values, the
// background probability last. `class_ids` picks the candidate subset.
std::vector<double> classify_region(const Tensor& region_row, const ClassCatalog& catalog,
                                    const std::vector<std::size_t>& class_ids);

struct Detection {
  regions::Box box;
  std::size_t class_id = 0;
  double confidence = 0.0;
};

// Tagged detection list so downstream scoring can verify which class subset
// produced it.
struct DetectionSet {
  Setup setup = Setup::generalized;
  std::vector<Detection> detections;
};

// Greedy per-class suppression: keep the highest-score box, drop anything
// overlapping it above `iou_threshold`, repeat. Ties break on input order.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold);

// Classify every region, drop background argmaxes and low scores, suppress
// duplicates, sort by confidence.
DetectionSet detect(const Model& model, const regions::RegionSet& rs, const ClassCatalog& catalog,
                    Setup setup, double score_threshold, double nms_iou);

// One cross-entropy step target: region label is a class id or background.
struct LabeledRegions {
  Tensor raw_features;             // N x F
  std::vector<std::size_t> labels;  // class id, or catalog size for background
};

// Mean cross-entropy of the known-class posteriors (background last column).
// Rejects labels outside known classes + background.
diff::Var stt_loss(emb::Binding& bind, Model& model, const ClassCatalog& catalog,
                   const LabeledRegions& batch);

}  // namespace locov::det
