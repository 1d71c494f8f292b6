#include "core/fusion.hpp"

#include <algorithm>
#include <cmath>

#include "core/error.hpp"
#include "core/matching.hpp"

namespace locov::fusion {

void CrossAttentionModel::init(const FusionDims& dims, Rng& rng) {
  if (dims.dim == 0 || dims.heads == 0 || dims.dim % dims.heads != 0)
    fail("invalid-config", "fusion dim must be a positive multiple of the head count");
  dims_ = dims;
  std::size_t d = dims.dim;
  std::size_t dk = d / dims.heads;
  double attn_std = std::sqrt(2.0 / static_cast<double>(d + dk));
  double d_std = std::sqrt(2.0 / static_cast<double>(2 * d));
  double ffn_std1 = std::sqrt(2.0 / static_cast<double>(d + dims.ffn_hidden));

  match_token_.init("fusion/match_token", Tensor::randn(1, d, rng, 0.02));
  positions_.init("fusion/positions", Tensor::randn(dims.max_positions, d, rng, 0.02));
  // the score head starts at zero: a random head reads pairing-uncorrelated
  // noise at first, and the matching loss then flattens it into a dead
  // constant-score optimum it never escapes
  score_w_.init("fusion/score/weight", Tensor::zeros(d, 1));
  score_b_.init("fusion/score/bias", Tensor::zeros(1, 1));

  layers_.resize(dims.layers);
  for (std::size_t l = 0; l < dims.layers; ++l) {
    Layer& layer = layers_[l];
    std::string base = "fusion/layer" + std::to_string(l);
    layer.heads.resize(dims.heads);
    for (std::size_t h = 0; h < dims.heads; ++h) {
      std::string hb = base + "/head" + std::to_string(h);
      layer.heads[h].wq.init(hb + "/wq", Tensor::randn(d, dk, rng, attn_std));
      layer.heads[h].wk.init(hb + "/wk", Tensor::randn(d, dk, rng, attn_std));
      layer.heads[h].wv.init(hb + "/wv", Tensor::randn(d, dk, rng, attn_std));
    }
    layer.attn_out_w.init(base + "/attn_out/weight", Tensor::randn(d, d, rng, d_std));
    layer.attn_out_b.init(base + "/attn_out/bias", Tensor::zeros(1, d));
    layer.ln1_gain.init(base + "/ln1/gain", Tensor::full(1, d, 1.0));
    layer.ln1_bias.init(base + "/ln1/bias", Tensor::zeros(1, d));
    layer.ffn_w1.init(base + "/ffn/w1", Tensor::randn(d, dims.ffn_hidden, rng, ffn_std1));
    layer.ffn_b1.init(base + "/ffn/b1", Tensor::zeros(1, dims.ffn_hidden));
    layer.ffn_w2.init(base + "/ffn/w2", Tensor::randn(dims.ffn_hidden, d, rng, ffn_std1));
    layer.ffn_b2.init(base + "/ffn/b2", Tensor::zeros(1, d));
    layer.ln2_gain.init(base + "/ln2/gain", Tensor::full(1, d, 1.0));
    layer.ln2_bias.init(base + "/ln2/bias", Tensor::zeros(1, d));
  }
}

std::vector<emb::Parameter*> CrossAttentionModel::parameters() {
  std::vector<emb::Parameter*> ps{&match_token_, &positions_, &score_w_, &score_b_};
  for (Layer& l : layers_) {
    for (Head& h : l.heads) {
      ps.push_back(&h.wq);
      ps.push_back(&h.wk);
      ps.push_back(&h.wv);
    }
    ps.push_back(&l.attn_out_w);
    ps.push_back(&l.attn_out_b);
    ps.push_back(&l.ln1_gain);
    ps.push_back(&l.ln1_bias);
    ps.push_back(&l.ffn_w1);
    ps.push_back(&l.ffn_b1);
    ps.push_back(&l.ffn_w2);
    ps.push_back(&l.ffn_b2);
    ps.push_back(&l.ln2_gain);
    ps.push_back(&l.ln2_bias);
  }
  return ps;
}

CrossAttentionModel::Fused CrossAttentionModel::forward(emb::Binding& bind, diff::Var regions,
                                                        diff::Var words) {
  const Tensor& r = regions.value();
  const Tensor& w = words.value();
  if (r.rows() == 0) fail("empty-side", "fusion needs at least one region");
  if (w.rows() == 0) fail("empty-side", "fusion needs at least one word");
  if (r.cols() != dims_.dim || w.cols() != dims_.dim)
    fail("shape-mismatch", "fusion expects width " + std::to_string(dims_.dim));
  if (w.rows() > dims_.max_positions)
    fail("shape-mismatch", "caption longer than the positional table");

  std::size_t n_regions = r.rows();
  std::size_t n_words = w.rows();
  std::vector<std::size_t> pos_ids(n_words);
  for (std::size_t i = 0; i < n_words; ++i) pos_ids[i] = i;
  diff::Var words_pos = diff::add(words, diff::take_rows(bind(positions_), pos_ids));
  diff::Var x = diff::concat_rows({bind(match_token_), regions, words_pos});

  double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dims_.dim / dims_.heads));
  for (Layer& layer : layers_) {
    std::vector<diff::Var> head_outs;
    head_outs.reserve(layer.heads.size());
    for (Head& h : layer.heads) {
      diff::Var q = diff::matmul(x, bind(h.wq));
      diff::Var k = diff::matmul(x, bind(h.wk));
      diff::Var v = diff::matmul(x, bind(h.wv));
      diff::Var attn = diff::row_softmax(diff::scale(diff::matmul(q, diff::transpose(k)), inv_sqrt_dk));
      head_outs.push_back(diff::matmul(attn, v));
    }
    diff::Var attn_out =
        diff::add_row(diff::matmul(diff::concat_cols(head_outs), bind(layer.attn_out_w)), bind(layer.attn_out_b));
    x = diff::layer_norm_rows(diff::add(x, attn_out), bind(layer.ln1_gain), bind(layer.ln1_bias));
    diff::Var h1 = diff::gelu(diff::add_row(diff::matmul(x, bind(layer.ffn_w1)), bind(layer.ffn_b1)));
    diff::Var h2 = diff::add_row(diff::matmul(h1, bind(layer.ffn_w2)), bind(layer.ffn_b2));
    x = diff::layer_norm_rows(diff::add(x, h2), bind(layer.ln2_gain), bind(layer.ln2_bias));
  }

  Fused f;
  diff::Var cls = diff::slice_rows(x, 0, 1);
  f.score = diff::add(diff::matmul(cls, bind(score_w_)), bind(score_b_));
  f.word_states = diff::slice_rows(x, 1 + n_regions, 1 + n_regions + n_words);
  return f;
}

double icm_loss(const Tensor& fused_scores) {
  diff::Tape tape;
  return icm_loss(tape.constant(fused_scores)).value().scalar_value();
}

diff::Var icm_loss(diff::Var fused_scores) {
  diff::Var img = match::grounding_loss(fused_scores, match::Axis::image);
  diff::Var cap = match::grounding_loss(fused_scores, match::Axis::caption);
  return diff::scale(diff::add(img, cap), 0.5);
}

MaskedCaption mask_caption(const std::vector<std::size_t>& ids, double rate, Rng& rng,
                           std::size_t mask_id, std::size_t pad_id) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] != pad_id) candidates.push_back(i);
  if (candidates.empty()) fail("empty-mask", "caption has no maskable tokens");

  std::size_t want = static_cast<std::size_t>(std::floor(rate * static_cast<double>(candidates.size())));
  if (want < 1) want = 1;
  if (want > candidates.size()) want = candidates.size();
  rng.shuffle(candidates);
  candidates.resize(want);
  std::sort(candidates.begin(), candidates.end());

  MaskedCaption out;
  out.tokens = ids;
  for (std::size_t pos : candidates) {
    out.positions.push_back(pos);
    out.originals.push_back(ids[pos]);
    out.tokens[pos] = mask_id;
  }
  return out;
}

diff::Var mlm_loss(emb::Binding& bind, CrossAttentionModel& model, diff::Var table,
                   const MaskedCaption& masked, diff::Var regions, std::size_t pad_id) {
  if (masked.positions.empty()) fail("empty-mask", "no masked positions");
  diff::Var words = emb::embed_caption(table, masked.tokens, pad_id);
  auto fused = model.forward(bind, regions, words);
  diff::Var states = diff::take_rows(fused.word_states, masked.positions);
  diff::Var logits = diff::matmul(states, diff::transpose(table));
  return diff::rows_nll(diff::row_log_softmax(logits), masked.originals);
}

namespace {

void check_distribution(const MatchDistribution& d, Phase phase, const char* label) {
  if (d.probs.empty()) fail("empty-distribution", std::string(label) + " is empty");
  if (d.phase != phase) fail("shape-mismatch", std::string(label) + " has the wrong phase tag");
}

}  // namespace

double consistency_loss(const MatchDistribution& p_box, const MatchDistribution& p_grid,
                        const MatchDistribution& q_box, const MatchDistribution& q_grid) {
  check_distribution(p_box, Phase::pre, "p_box");
  check_distribution(p_grid, Phase::pre, "p_grid");
  check_distribution(q_box, Phase::post, "q_box");
  check_distribution(q_grid, Phase::post, "q_grid");
  if (p_box.kind != regions::RegionKind::box || q_box.kind != regions::RegionKind::box ||
      p_grid.kind != regions::RegionKind::grid || q_grid.kind != regions::RegionKind::grid)
    fail("shape-mismatch", "distribution kind tags do not match their slots");
  if (p_box.probs.size() != q_box.probs.size() || p_grid.probs.size() != q_grid.probs.size() ||
      p_grid.probs.size() != q_box.probs.size())
    fail("shape-mismatch", "distribution lengths differ");

  diff::Tape tape;
  auto row = [&](const std::vector<double>& xs) { return tape.constant(Tensor::row(xs)); };
  diff::Var total = diff::add(diff::kl_divergence(row(p_box.probs), row(q_box.probs)),
                              diff::add(diff::kl_divergence(row(p_grid.probs), row(q_grid.probs)),
                                        diff::kl_divergence(row(p_grid.probs), row(q_box.probs))));
  return total.value().scalar_value();
}

diff::Var consistency_loss(diff::Var p_box, diff::Var p_grid, diff::Var q_box, diff::Var q_grid) {
  const Tensor& pb = p_box.value();
  if (!pb.same_shape(q_box.value()) || !p_grid.value().same_shape(q_grid.value()) ||
      p_grid.value().rows() != pb.rows())
    fail("shape-mismatch", "consistency distribution shapes differ");
  double inv_rows = 1.0 / static_cast<double>(pb.rows());
  diff::Var total = diff::add(diff::kl_divergence(p_box, q_box),
                              diff::add(diff::kl_divergence(p_grid, q_grid),
                                        diff::kl_divergence(p_grid, q_box)));
  return diff::scale(total, inv_rows);
}

diff::Var consistency_loss_single(diff::Var p, diff::Var q) {
  const Tensor& pv = p.value();
  if (!pv.same_shape(q.value())) fail("shape-mismatch", "consistency distribution shapes differ");
  return diff::scale(diff::kl_divergence(p, q), 1.0 / static_cast<double>(pv.rows()));
}

diff::Var lsm_total_loss(const std::vector<diff::Var>& components) {
  if (components.empty()) fail("empty-side", "no loss components enabled");
  diff::Var total = components[0];
  for (std::size_t i = 1; i < components.size(); ++i) total = diff::add(total, components[i]);
  if (!total.value().all_finite()) fail("non-finite-loss", "training loss is not finite");
  return total;
}

}  // namespace locov::fusion
