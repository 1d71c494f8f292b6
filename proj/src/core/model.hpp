#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "core/embeddings.hpp"
#include "core/fusion.hpp"

namespace locov {

struct ModelDims {
  std::size_t vocab = 0;
  std::size_t embed_dim = 64;
  std::size_t feature_dim = 24;
  std::size_t encoder_stages = 4;
  double embed_init_std = 0.02;
  fusion::FusionDims fusion;
};

// Sets of parameter-group prefixes that stay fixed during a training stage.
// Group names: "encoder/stage<N>", "proj", "embed", "fusion".
struct FreezePolicy {
  std::set<std::string> frozen;

  bool covers(const std::string& param_name) const;
  static FreezePolicy none() { return {}; }
};

// Everything trainable in one place. The raw-feature path is
// encoder -> projection; captions go through the embedding table.
struct Model {
  ModelDims dims;
  emb::EmbeddingTable table;
  emb::RegionEncoder encoder;
  emb::ProjectionLayer projection;
  fusion::CrossAttentionModel xattn;

  void init(const ModelDims& d, Rng& rng);

  std::vector<emb::Parameter*> parameters();
  std::map<std::string, emb::Parameter*> parameter_map();

  // flips trainable flags; everything not covered becomes trainable
  void apply_freeze(const FreezePolicy& policy);

  void zero_grads();

  // raw region features -> embedding-space rows (no tape)
  Tensor encode_regions(const Tensor& raw) const;
  diff::Var encode_regions(emb::Binding& bind, diff::Var raw);
};

}  // namespace locov
