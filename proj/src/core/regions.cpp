#include "core/regions.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "core/error.hpp"

namespace locov::regions {

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) fail("invalid-box", "iou of degenerate box");
  double ix1 = std::max(a.x1, b.x1);
  double iy1 = std::max(a.y1, b.y1);
  double ix2 = std::min(a.x2, b.x2);
  double iy2 = std::min(a.y2, b.y2);
  double iw = ix2 - ix1;
  double ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

RegionSet select_box_regions(const std::vector<Proposal>& proposals, const Tensor& features,
                             double objectness_threshold, std::size_t cap) {
  if (features.rows() != proposals.size())
    fail("shape-mismatch", "proposal count " + std::to_string(proposals.size()) + " vs feature rows " +
                               std::to_string(features.rows()));
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    if (!proposals[i].box.valid()) fail("invalid-box", "degenerate proposal box");
    if (proposals[i].objectness > objectness_threshold) keep.push_back(i);
  }
  std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) {
    return proposals[a].objectness > proposals[b].objectness;
  });
  if (keep.size() > cap) keep.resize(cap);

  RegionSet rs;
  rs.kind = RegionKind::box;
  rs.features = Tensor(keep.size(), features.cols());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    rs.boxes.push_back(proposals[keep[i]].box);
    for (std::size_t j = 0; j < features.cols(); ++j) rs.features.at(i, j) = features.at(keep[i], j);
  }
  return rs;
}

RegionSet make_grid_regions(const Tensor& feature_map, double image_w, double image_h) {
  if (feature_map.shape.size() != 3 || feature_map.shape[0] != feature_map.shape[1])
    fail("shape-mismatch", "grid feature map must be GxGxF, got " + feature_map.shape_str());
  std::size_t g = feature_map.shape[0];
  std::size_t f = feature_map.shape[2];
  RegionSet rs;
  rs.kind = RegionKind::grid;
  rs.features = feature_map.reshaped_2d();
  double cw = image_w / static_cast<double>(g);
  double ch = image_h / static_cast<double>(g);
  rs.boxes.reserve(g * g);
  for (std::size_t r = 0; r < g; ++r)
    for (std::size_t c = 0; c < g; ++c)
      rs.boxes.push_back(Box{c * cw, r * ch, (c + 1) * cw, (r + 1) * ch});
  (void)f;
  return rs;
}

std::vector<std::size_t> subsample_indices(std::size_t count, std::size_t cap) {
  if (cap == 0) fail("invalid-config", "region cap must be positive");
  std::vector<std::size_t> idx;
  if (count <= cap) {
    idx.resize(count);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }
  idx.reserve(cap);
  for (std::size_t i = 0; i < cap; ++i) idx.push_back((i * count) / cap);
  return idx;
}

RegionSet subsample(const RegionSet& rs, std::size_t cap) {
  std::vector<std::size_t> idx = subsample_indices(rs.count(), cap);
  if (idx.size() == rs.count()) return rs;
  RegionSet out;
  out.kind = rs.kind;
  out.features = Tensor(idx.size(), rs.features.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.boxes.push_back(rs.boxes[idx[i]]);
    for (std::size_t j = 0; j < rs.features.cols(); ++j)
      out.features.at(i, j) = rs.features.at(idx[i], j);
  }
  return out;
}

}  // namespace locov::regions
