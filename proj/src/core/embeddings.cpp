#include "core/embeddings.hpp"

#include <cmath>

#include "core/error.hpp"

namespace locov::emb {

diff::Var Binding::operator()(Parameter& p) {
  for (auto& [bp, var] : bound_)
    if (bp == &p) return var;
  diff::Var v = tape_.leaf(p.value, p.trainable);
  bound_.emplace_back(&p, v);
  return v;
}

void Binding::harvest() {
  for (auto& [p, var] : bound_) {
    if (!p->trainable) continue;
    if (!tape_.has_grad(var.id)) continue;  // bound but unused by the loss
    add_into(p->grad, tape_.grad_of(var.id));
  }
}

void EmbeddingTable::init(std::size_t vocab, std::size_t dim, Rng& rng, double stddev) {
  table.init("embed/table", Tensor::randn(vocab, dim, rng, stddev));
}

Tensor embed_caption(const EmbeddingTable& table, const std::vector<std::size_t>& ids,
                     std::size_t pad_id) {
  std::vector<std::size_t> kept;
  for (std::size_t id : ids)
    if (id != pad_id) kept.push_back(id);
  if (kept.empty()) fail("empty-side", "caption has no non-padding tokens");
  Tensor out(kept.size(), table.dim());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (kept[i] >= table.vocab()) fail("unknown-token", "token id out of range");
    for (std::size_t j = 0; j < table.dim(); ++j) out.at(i, j) = table.table.value.at(kept[i], j);
  }
  return out;
}

diff::Var embed_caption(diff::Var table, const std::vector<std::size_t>& ids, std::size_t pad_id) {
  std::vector<std::size_t> kept;
  for (std::size_t id : ids)
    if (id != pad_id) kept.push_back(id);
  if (kept.empty()) fail("empty-side", "caption has no non-padding tokens");
  return diff::take_rows(table, kept);
}

Tensor class_embedding(const EmbeddingTable& table, const std::vector<std::size_t>& token_ids) {
  if (token_ids.empty()) fail("empty-class-name", "class name has no tokens");
  Tensor out(1, table.dim());
  for (std::size_t id : token_ids) {
    if (id >= table.vocab()) fail("unknown-token", "token id out of range");
    for (std::size_t j = 0; j < table.dim(); ++j) out.v[j] += table.table.value.at(id, j);
  }
  for (double& e : out.v) e /= static_cast<double>(token_ids.size());
  return out;
}

diff::Var class_embedding(diff::Var table, const std::vector<std::size_t>& token_ids) {
  if (token_ids.empty()) fail("empty-class-name", "class name has no tokens");
  return diff::mean_rows(diff::take_rows(table, token_ids));
}

void ProjectionLayer::init(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
  double stddev = std::sqrt(2.0 / static_cast<double>(in_dim + out_dim));
  weight.init("proj/weight", Tensor::randn(in_dim, out_dim, rng, stddev));
  bias.init("proj/bias", Tensor::zeros(1, out_dim));
}

Tensor ProjectionLayer::apply(const Tensor& x) const {
  if (x.cols() != weight.value.rows())
    fail("shape-mismatch", "projection input " + x.shape_str() + " vs weight " + weight.value.shape_str());
  Tensor out = matmul(x, weight.value);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out.at(i, j) += bias.value.v[j];
  return out;
}

diff::Var ProjectionLayer::apply(Binding& bind, diff::Var x) {
  return diff::add_row(diff::matmul(x, bind(weight)), bind(bias));
}

void RegionEncoder::init(std::size_t dim, std::size_t stages, Rng& rng) {
  weights.resize(stages);
  biases.resize(stages);
  double stddev = std::sqrt(2.0 / static_cast<double>(dim));
  for (std::size_t s = 0; s < stages; ++s) {
    std::string base = "encoder/stage" + std::to_string(s + 1);
    weights[s].init(base + "/weight", Tensor::randn(dim, dim, rng, stddev));
    biases[s].init(base + "/bias", Tensor::zeros(1, dim));
  }
}

Tensor RegionEncoder::apply(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t s = 0; s < weights.size(); ++s) {
    Tensor z = matmul(h, weights[s].value);
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < z.cols(); ++j) z.at(i, j) += biases[s].value.v[j];
    for (double& e : z.v) e = e * 0.5 * (1.0 + std::erf(e * 0.70710678118654752440));
    h = std::move(z);
  }
  return h;
}

diff::Var RegionEncoder::apply(Binding& bind, diff::Var x) {
  diff::Var h = x;
  for (std::size_t s = 0; s < weights.size(); ++s)
    h = diff::gelu(diff::add_row(diff::matmul(h, bind(weights[s])), bind(biases[s])));
  return h;
}

}  // namespace locov::emb
