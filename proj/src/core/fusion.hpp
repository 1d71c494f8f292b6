#pragma once

#include <cstddef>
#include <vector>

#include "core/embeddings.hpp"
#include "core/regions.hpp"
#include "core/rng.hpp"
#include "core/tape.hpp"

namespace locov::fusion {

struct FusionDims {
  std::size_t dim = 64;
  std::size_t layers = 6;
  std::size_t heads = 8;
  std::size_t ffn_hidden = 128;
  std::size_t max_positions = 16;
};

// Transformer encoder over [match-token; regions; words]. Regions enter
// without positional information (they are a set); words get learned
// positions. The match-token state feeds a linear head that scores how well
// the caption describes the regions.
class CrossAttentionModel {
 public:
  void init(const FusionDims& dims, Rng& rng);

  struct Fused {
    diff::Var score;        // 1x1
    diff::Var word_states;  // m x D hidden states at the word positions
  };
  Fused forward(emb::Binding& bind, diff::Var regions, diff::Var words);

  std::vector<emb::Parameter*> parameters();
  const FusionDims& dims() const { return dims_; }

 private:
  struct Head {
    emb::Parameter wq, wk, wv;
  };
  struct Layer {
    std::vector<Head> heads;
    emb::Parameter attn_out_w, attn_out_b;
    emb::Parameter ln1_gain, ln1_bias;
    emb::Parameter ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    emb::Parameter ln2_gain, ln2_bias;
  };

  FusionDims dims_;
  emb::Parameter match_token_;  // 1 x D
  emb::Parameter positions_;    // max_positions x D
  emb::Parameter score_w_, score_b_;
  std::vector<Layer> layers_;
};

// Batch-contrastive loss over a square matrix of fused scores; mean of the
// two normalization axes.
double icm_loss(const Tensor& fused_scores);
diff::Var icm_loss(diff::Var fused_scores);

// Caption masking for the reconstruction loss.
struct MaskedCaption {
  std::vector<std::size_t> tokens;     // with masked slots replaced
  std::vector<std::size_t> originals;  // ids the masked slots held
  std::vector<std::size_t> positions;  // word positions that were masked
};

MaskedCaption mask_caption(const std::vector<std::size_t>& ids, double rate, Rng& rng,
                           std::size_t mask_id, std::size_t pad_id);

// Masked-token reconstruction: fused word states at the masked positions are
// scored against every vocabulary row; mean NLL of the original ids.
diff::Var mlm_loss(emb::Binding& bind, CrossAttentionModel& model, diff::Var table,
                   const MaskedCaption& masked, diff::Var regions, std::size_t pad_id);

enum class Phase { pre, post };

// One image's matching distribution over the batch captions, tagged with
// where it came from.
struct MatchDistribution {
  std::vector<double> probs;
  Phase phase = Phase::pre;
  regions::RegionKind kind = regions::RegionKind::box;
};

// KL(p_box||q_box) + KL(p_grid||q_grid) + KL(p_grid||q_box) for one image.
double consistency_loss(const MatchDistribution& p_box, const MatchDistribution& p_grid,
                        const MatchDistribution& q_box, const MatchDistribution& q_grid);

// Same three terms on row-stacked distribution matrices, averaged over rows.
// Callers that want q to chase a fixed target pass p through stop_gradient.
diff::Var consistency_loss(diff::Var p_box, diff::Var p_grid, diff::Var q_box, diff::Var q_grid);
diff::Var consistency_loss_single(diff::Var p, diff::Var q);

// Sum of the enabled components; rejects non-finite totals.
diff::Var lsm_total_loss(const std::vector<diff::Var>& components);

}  // namespace locov::fusion
