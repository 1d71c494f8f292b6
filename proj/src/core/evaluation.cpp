#include "core/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "core/error.hpp"

namespace locov::eval {

const std::vector<double>& iou_thresholds() {
  static const std::vector<double> ts = {0.50, 0.55, 0.60, 0.65, 0.70,
                                         0.75, 0.80, 0.85, 0.90, 0.95};
  return ts;
}

double average_precision(const std::vector<ImageDetections>& dets,
                         const std::vector<ImageGroundTruth>& gts, std::size_t class_id,
                         double iou_threshold) {
  if (dets.size() != gts.size())
    fail("shape-mismatch", "detection images vs ground-truth images");

  struct Ranked {
    std::size_t image;
    double confidence;
    regions::Box box;
  };
  std::vector<Ranked> ranked;
  std::size_t total_gt = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (const det::Detection& d : dets[i].detections)
      if (d.class_id == class_id) ranked.push_back({i, d.confidence, d.box});
    for (const GroundTruthBox& g : gts[i].boxes)
      if (g.class_id == class_id) ++total_gt;
  }
  if (total_gt == 0 || ranked.empty()) return 0.0;

  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.confidence > b.confidence; });

  // per-image per-annotation matched flags
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].boxes.size(), false);

  std::size_t n = ranked.size();
  std::vector<std::size_t> tp_at(n);
  std::size_t tp = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const Ranked& d = ranked[r];
    const auto& gt_boxes = gts[d.image].boxes;
    double best_iou = -1.0;
    std::size_t best = gt_boxes.size();
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      if (gt_boxes[g].class_id != class_id || used[d.image][g]) continue;
      double ov = regions::iou(d.box, gt_boxes[g].box);
      if (ov > best_iou) {
        best_iou = ov;
        best = g;
      }
    }
    if (best != gt_boxes.size() && best_iou >= iou_threshold) {
      used[d.image][best] = true;
      ++tp;
    }
    tp_at[r] = tp;
  }

  // precision at each rank, then the envelope from the right
  std::vector<double> envelope(n);
  double run = 0.0;
  for (std::size_t r = n; r-- > 0;) {
    double prec = static_cast<double>(tp_at[r]) / static_cast<double>(r + 1);
    run = std::max(run, prec);
    envelope[r] = run;
  }

  // rank of the k-th true positive; envelope there covers all recall >= k/GT
  double sum = 0.0;
  std::size_t k = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (tp_at[r] == k + 1) {
      sum += envelope[r];
      ++k;
    }
  }
  return sum / static_cast<double>(total_gt);
}

namespace {

det::Setup setup_from_name(const std::string& name) {
  if (name == "novel") return det::Setup::novel;
  if (name == "known") return det::Setup::known;
  if (name == "generalized") return det::Setup::generalized;
  fail("setup-mismatch", "unknown setup name: " + name);
}

ClassScores score_class(const std::vector<ImageDetections>& dets,
                        const std::vector<ImageGroundTruth>& gts, std::size_t class_id,
                        std::size_t gt_count) {
  ClassScores cs;
  cs.gt_count = gt_count;
  double sum = 0.0;
  for (double t : iou_thresholds()) {
    double ap = average_precision(dets, gts, class_id, t);
    cs.per_threshold.push_back(ap);
    sum += ap;
  }
  cs.ap = sum / static_cast<double>(iou_thresholds().size());
  cs.ap50 = cs.per_threshold[0];
  cs.ap75 = cs.per_threshold[5];
  return cs;
}

}  // namespace

EvalReport evaluate(const std::map<std::string, std::vector<det::DetectionSet>>& dets_per_setup,
                    const std::vector<ImageGroundTruth>& gts, const det::ClassCatalog& catalog) {
  EvalReport report;
  report.thresholds = iou_thresholds();

  for (const char* name : {"novel", "known", "generalized"}) {
    auto it = dets_per_setup.find(name);
    if (it == dets_per_setup.end()) continue;
    det::Setup setup = setup_from_name(name);
    const auto& sets = it->second;
    if (sets.size() != gts.size()) fail("shape-mismatch", "detections vs images for setup " + std::string(name));

    std::vector<ImageDetections> dets(sets.size());
    for (std::size_t i = 0; i < sets.size(); ++i) {
      if (sets[i].setup != setup)
        fail("setup-mismatch", "detections tagged with a different class subset than " + std::string(name));
      dets[i].detections = sets[i].detections;
    }

    SetupScores ss;
    std::vector<std::size_t> class_ids = det::setup_class_ids(catalog, setup);
    double sum_ap = 0, sum_50 = 0, sum_75 = 0;
    std::size_t counted = 0;
    for (std::size_t cid : class_ids) {
      std::size_t gt_count = 0;
      for (const auto& g : gts)
        for (const auto& b : g.boxes)
          if (b.class_id == cid) ++gt_count;
      if (gt_count == 0) continue;  // absent classes stay out of the mean
      ClassScores cs = score_class(dets, gts, cid, gt_count);
      sum_ap += cs.ap;
      sum_50 += cs.ap50;
      sum_75 += cs.ap75;
      ++counted;
      ss.per_class[catalog.by_id(cid).name] = std::move(cs);
    }
    if (counted > 0) {
      ss.ap = sum_ap / static_cast<double>(counted);
      ss.ap50 = sum_50 / static_cast<double>(counted);
      ss.ap75 = sum_75 / static_cast<double>(counted);
    }
    report.setups[name] = std::move(ss);
  }

  auto gen = report.setups.find("generalized");
  if (gen != report.setups.end()) {
    for (const auto& [cls, scores] : gen->second.per_class) {
      // compare against the class's constrained block when it was evaluated
      for (const char* other : {"novel", "known"}) {
        auto block = report.setups.find(other);
        if (block == report.setups.end()) continue;
        auto ind = block->second.per_class.find(cls);
        if (ind == block->second.per_class.end()) continue;
        report.generalized_delta_ap50[cls] = scores.ap50 - ind->second.ap50;
      }
    }
  }
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["iou_thresholds"] = thresholds;
  nlohmann::ordered_json js;
  for (const char* name : {"novel", "known", "generalized"}) {
    auto it = setups.find(name);
    if (it == setups.end()) continue;
    nlohmann::ordered_json s;
    s["ap"] = it->second.ap;
    s["ap50"] = it->second.ap50;
    s["ap75"] = it->second.ap75;
    nlohmann::ordered_json pc;
    for (const auto& [cls, cs] : it->second.per_class) {
      nlohmann::ordered_json c;
      c["ap"] = cs.ap;
      c["ap50"] = cs.ap50;
      c["ap75"] = cs.ap75;
      c["per_threshold"] = cs.per_threshold;
      c["gt_count"] = cs.gt_count;
      pc[cls] = std::move(c);
    }
    s["per_class"] = std::move(pc);
    js[name] = std::move(s);
  }
  j["setups"] = std::move(js);
  j["generalized_delta_ap50"] = generalized_delta_ap50;
  return j.dump(2);
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "setup,class,ap,ap50,ap75,gt_count,delta_ap50_generalized\n";
  for (const char* name : {"novel", "known", "generalized"}) {
    auto it = setups.find(name);
    if (it == setups.end()) continue;
    for (const auto& [cls, cs] : it->second.per_class) {
      os << name << ',' << cls << ',' << cs.ap << ',' << cs.ap50 << ',' << cs.ap75 << ','
         << cs.gt_count << ',';
      auto d = generalized_delta_ap50.find(cls);
      if (std::string(name) == "generalized" && d != generalized_delta_ap50.end()) os << d->second;
      os << '\n';
    }
    os << name << ",__mean__," << it->second.ap << ',' << it->second.ap50 << ',' << it->second.ap75
       << ",,\n";
  }
  return os.str();
}

}  // namespace locov::eval
