#pragma once

#include <cstddef>
#include <vector>

#include "core/tensor.hpp"

namespace locov::regions {

// Axis-aligned box, corner form. Coordinates in image units.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const { return x2 > x1 && y2 > y1; }
};

double iou(const Box& a, const Box& b);

// Class-agnostic box candidate with an objectness score.
struct Proposal {
  Box box;
  double objectness = 0.0;
};

enum class RegionKind { box, grid };

// A bag of same-kind regions for one image: geometry plus raw features,
// one feature row per region. Region order carries no meaning.
struct RegionSet {
  RegionKind kind = RegionKind::box;
  std::vector<Box> boxes;
  Tensor features;  // N x F

  std::size_t count() const { return boxes.size(); }
};

// Keeps proposals with objectness above the threshold, best first, at most
// `cap` of them. Ties and order are resolved by (score desc, index asc).
RegionSet select_box_regions(const std::vector<Proposal>& proposals, const Tensor& features,
                             double objectness_threshold, std::size_t cap);

// Turns a G x G x F feature map into G*G grid regions with their cell boxes.
RegionSet make_grid_regions(const Tensor& feature_map, double image_w, double image_h);

// Deterministic thinning to at most `cap` regions (evenly strided by index).
std::vector<std::size_t> subsample_indices(std::size_t count, std::size_t cap);
RegionSet subsample(const RegionSet& rs, std::size_t cap);

}  // namespace locov::regions
