#include "core/detector.hpp"

#include <algorithm>
#include <cmath>

#include "core/error.hpp"

namespace locov::det {

std::vector<std::size_t> ClassCatalog::known_ids() const {
  std::vector<std::size_t> ids;
  for (const ClassInfo& c : classes)
    if (c.known) ids.push_back(c.id);
  return ids;
}

std::vector<std::size_t> ClassCatalog::novel_ids() const {
  std::vector<std::size_t> ids;
  for (const ClassInfo& c : classes)
    if (!c.known) ids.push_back(c.id);
  return ids;
}

const ClassInfo& ClassCatalog::by_id(std::size_t id) const {
  if (id >= classes.size()) fail("unknown-token", "class id out of range");
  return classes[id];
}

ClassCatalog ClassCatalog::build(const std::vector<ClassInfo>& classes,
                                 const emb::EmbeddingTable& table) {
  ClassCatalog cat;
  cat.classes = classes;
  cat.embeddings = Tensor(classes.size(), table.dim());
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i].id != i) fail("invalid-config", "class ids must be dense and ordered");
    Tensor e = emb::class_embedding(table, classes[i].token_ids);
    for (std::size_t j = 0; j < table.dim(); ++j) cat.embeddings.at(i, j) = e.v[j];
  }
  return cat;
}

std::vector<std::size_t> setup_class_ids(const ClassCatalog& catalog, Setup setup) {
  switch (setup) {
    case Setup::novel:
      return catalog.novel_ids();
    case Setup::known:
      return catalog.known_ids();
    case Setup::generalized:
    default: {
      std::vector<std::size_t> ids(catalog.classes.size());
      for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
      return ids;
    }
  }
}

std::vector<double> classify_region(const Tensor& region_row, const ClassCatalog& catalog,
                                    const std::vector<std::size_t>& class_ids) {
  if (class_ids.empty()) fail("empty-distribution", "no candidate classes");
  if (region_row.numel() != catalog.embeddings.cols())
    fail("shape-mismatch", "region width " + region_row.shape_str() + " vs class embeddings");
  std::size_t k = class_ids.size();
  std::vector<double> logits(k + 1, 0.0);  // background logit stays 0
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t c = class_ids[i];
    if (c >= catalog.classes.size()) fail("unknown-token", "class id out of range");
    double dot = 0.0;
    for (std::size_t j = 0; j < catalog.embeddings.cols(); ++j)
      dot += region_row.v[j] * catalog.embeddings.at(c, j);
    logits[i] = dot;
  }
  double m = 0.0;
  for (double z : logits) m = std::max(m, z);
  double denom = 0.0;
  for (double z : logits) denom += std::exp(z - m);
  std::vector<double> probs(k + 1);
  for (std::size_t i = 0; i <= k; ++i) probs[i] = std::exp(logits[i] - m) / denom;
  return probs;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  std::vector<Detection> kept;
  std::vector<bool> dead(dets.size(), false);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dead[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t j = i + 1; j < dets.size(); ++j) {
      if (dead[j] || dets[j].class_id != dets[i].class_id) continue;
      if (regions::iou(dets[i].box, dets[j].box) > iou_threshold) dead[j] = true;
    }
  }
  return kept;
}

DetectionSet detect(const Model& model, const regions::RegionSet& rs, const ClassCatalog& catalog,
                    Setup setup, double score_threshold, double nms_iou) {
  DetectionSet out;
  out.setup = setup;
  if (rs.count() == 0) return out;

  std::vector<std::size_t> class_ids = setup_class_ids(catalog, setup);
  Tensor encoded = model.encode_regions(rs.features);
  std::vector<Detection> raw;
  for (std::size_t i = 0; i < rs.count(); ++i) {
    Tensor row(1, encoded.cols());
    for (std::size_t j = 0; j < encoded.cols(); ++j) row.v[j] = encoded.at(i, j);
    std::vector<double> probs = classify_region(row, catalog, class_ids);
    std::size_t best = 0;
    for (std::size_t k = 1; k < probs.size(); ++k)
      if (probs[k] > probs[best]) best = k;
    if (best == class_ids.size()) continue;  // background wins
    if (probs[best] < score_threshold) continue;
    raw.push_back(Detection{rs.boxes[i], class_ids[best], probs[best]});
  }
  out.detections = nms(std::move(raw), nms_iou);
  std::stable_sort(out.detections.begin(), out.detections.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  return out;
}

diff::Var stt_loss(emb::Binding& bind, Model& model, const ClassCatalog& catalog,
                   const LabeledRegions& batch) {
  if (batch.raw_features.rows() == 0) fail("empty-side", "no regions in the batch");
  if (batch.labels.size() != batch.raw_features.rows())
    fail("shape-mismatch", "label count vs region count");

  std::vector<std::size_t> known = catalog.known_ids();
  // dense id -> position among the known classes
  std::vector<std::size_t> pos(catalog.classes.size(), known.size());
  for (std::size_t i = 0; i < known.size(); ++i) pos[known[i]] = i;

  std::vector<std::size_t> targets;
  targets.reserve(batch.labels.size());
  for (std::size_t lbl : batch.labels) {
    if (lbl == catalog.classes.size()) {
      targets.push_back(known.size());  // background column
    } else {
      if (!catalog.by_id(lbl).known)
        fail("novel-label-in-stt", "label " + std::to_string(lbl) + " is not a known class");
      targets.push_back(pos[lbl]);
    }
  }

  diff::Tape& tape = bind.tape();
  diff::Var raw = tape.constant(batch.raw_features);
  diff::Var encoded = model.encode_regions(bind, raw);

  diff::Var class_mat;
  if (model.table.table.trainable) {
    // class embeddings keep receiving gradient when the table is not frozen
    std::vector<diff::Var> rows;
    diff::Var table_var = bind(model.table.table);
    for (std::size_t id : known) rows.push_back(emb::class_embedding(table_var, catalog.by_id(id).token_ids));
    class_mat = diff::concat_rows(rows);
  } else {
    Tensor known_embed(known.size(), catalog.embeddings.cols());
    for (std::size_t i = 0; i < known.size(); ++i)
      for (std::size_t j = 0; j < catalog.embeddings.cols(); ++j)
        known_embed.at(i, j) = catalog.embeddings.at(known[i], j);
    class_mat = tape.constant(std::move(known_embed));
  }

  diff::Var dots = diff::matmul(encoded, diff::transpose(class_mat));
  diff::Var logits =
      diff::concat_cols({dots, tape.constant(Tensor::zeros(batch.raw_features.rows(), 1))});
  return diff::rows_nll(diff::row_log_softmax(logits), targets);
}

}  // namespace locov::det
