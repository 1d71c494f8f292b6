#include "core/matching.hpp"

#include "core/error.hpp"

namespace locov::match {

namespace {

void check_pair(const Tensor& regions, const Tensor& words) {
  if (regions.rows() == 0) fail("empty-side", "pair has no regions");
  if (words.rows() == 0) fail("empty-side", "pair has no words");
  if (regions.cols() != words.cols())
    fail("shape-mismatch", "regions " + regions.shape_str() + " vs words " + words.shape_str());
}

void check_square(const Tensor& sims) {
  if (sims.rows() == 0) fail("empty-side", "empty similarity batch");
  if (sims.rows() != sims.cols())
    fail("shape-mismatch", "batch similarity matrix must be square, got " + sims.shape_str());
}

}  // namespace

Tensor alignment_weights(const Tensor& regions, const Tensor& words) {
  check_pair(regions, words);
  diff::Tape tape;
  diff::Var r = tape.constant(regions);
  diff::Var w = tape.constant(words);
  return alignment_weights(r, w).value();
}

diff::Var alignment_weights(diff::Var regions, diff::Var words) {
  check_pair(regions.value(), words.value());
  return diff::row_softmax(diff::matmul(regions, diff::transpose(words)));
}

double image_caption_similarity(const Tensor& regions, const Tensor& words) {
  diff::Tape tape;
  diff::Var r = tape.constant(regions);
  diff::Var w = tape.constant(words);
  return image_caption_similarity(r, w).value().scalar_value();
}

diff::Var image_caption_similarity(diff::Var regions, diff::Var words) {
  check_pair(regions.value(), words.value());
  diff::Var dots = diff::matmul(regions, diff::transpose(words));
  diff::Var weights = diff::row_softmax(dots);
  double n = static_cast<double>(regions.value().rows());
  return diff::scale(diff::sum_all(diff::mul(weights, dots)), 1.0 / n);
}

double grounding_loss(const Tensor& sims, Axis axis) {
  diff::Tape tape;
  return grounding_loss(tape.constant(sims), axis).value().scalar_value();
}

diff::Var grounding_loss(diff::Var sims, Axis axis) {
  check_square(sims.value());
  diff::Var m = (axis == Axis::image) ? sims : diff::transpose(sims);
  diff::Var diag = diff::diagonal(diff::row_log_softmax(m));
  double b = static_cast<double>(sims.value().rows());
  return diff::scale(diff::sum_all(diag), -1.0 / b);
}

double total_grounding_loss(const Tensor& box_sims, const Tensor& grid_sims) {
  diff::Tape tape;
  return total_grounding_loss(tape.constant(box_sims), tape.constant(grid_sims)).value().scalar_value();
}

diff::Var total_grounding_loss(diff::Var box_sims, diff::Var grid_sims) {
  diff::Var box_part = diff::add(grounding_loss(box_sims, Axis::caption), grounding_loss(box_sims, Axis::image));
  diff::Var grid_part =
      diff::add(grounding_loss(grid_sims, Axis::caption), grounding_loss(grid_sims, Axis::image));
  return diff::add(box_part, grid_part);
}

}  // namespace locov::match
