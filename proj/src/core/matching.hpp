#pragma once

#include <vector>

#include "core/tape.hpp"
#include "core/tensor.hpp"

namespace locov::match {

// Attention of each region over the caption words:
// a[i][j] = softmax_j(r_i . w_j). Rows sum to one.
Tensor alignment_weights(const Tensor& regions, const Tensor& words);
diff::Var alignment_weights(diff::Var regions, diff::Var words);

// Region-grounded similarity of one image-caption pair:
// (1/N) sum_i sum_j a[i][j] (r_i . w_j).
double image_caption_similarity(const Tensor& regions, const Tensor& words);
diff::Var image_caption_similarity(diff::Var regions, diff::Var words);

enum class Axis { image, caption };

// InfoNCE over a square batch similarity matrix (diagonal holds the
// positives). Axis::image normalizes each image over the batch captions,
// Axis::caption each caption over the batch images. Mean over the batch.
double grounding_loss(const Tensor& sims, Axis axis);
diff::Var grounding_loss(diff::Var sims, Axis axis);

// Sum of both axes for both region kinds.
double total_grounding_loss(const Tensor& box_sims, const Tensor& grid_sims);
diff::Var total_grounding_loss(diff::Var box_sims, diff::Var grid_sims);

}  // namespace locov::match
