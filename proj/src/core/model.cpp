#include "core/model.hpp"

#include "core/error.hpp"

namespace locov {

bool FreezePolicy::covers(const std::string& param_name) const {
  for (const std::string& g : frozen) {
    if (param_name.size() >= g.size() && param_name.compare(0, g.size(), g) == 0 &&
        (param_name.size() == g.size() || param_name[g.size()] == '/'))
      return true;
  }
  return false;
}

void Model::init(const ModelDims& d, Rng& rng) {
  if (d.vocab == 0) fail("invalid-config", "model needs a vocabulary size");
  if (d.fusion.dim != d.embed_dim) fail("invalid-config", "fusion width must equal the embedding width");
  dims = d;
  Rng table_rng = rng.fork(1);
  Rng encoder_rng = rng.fork(2);
  Rng proj_rng = rng.fork(3);
  Rng fusion_rng = rng.fork(4);
  table.init(d.vocab, d.embed_dim, table_rng, d.embed_init_std);
  encoder.init(d.feature_dim, d.encoder_stages, encoder_rng);
  projection.init(d.feature_dim, d.embed_dim, proj_rng);
  xattn.init(d.fusion, fusion_rng);
}

std::vector<emb::Parameter*> Model::parameters() {
  std::vector<emb::Parameter*> ps{&table.table};
  for (std::size_t s = 0; s < encoder.stages(); ++s) {
    ps.push_back(&encoder.weights[s]);
    ps.push_back(&encoder.biases[s]);
  }
  ps.push_back(&projection.weight);
  ps.push_back(&projection.bias);
  for (emb::Parameter* p : xattn.parameters()) ps.push_back(p);
  return ps;
}

std::map<std::string, emb::Parameter*> Model::parameter_map() {
  std::map<std::string, emb::Parameter*> m;
  for (emb::Parameter* p : parameters()) {
    if (m.count(p->name)) fail("invalid-config", "duplicate parameter name " + p->name);
    m[p->name] = p;
  }
  return m;
}

void Model::apply_freeze(const FreezePolicy& policy) {
  for (emb::Parameter* p : parameters()) p->trainable = !policy.covers(p->name);
}

void Model::zero_grads() {
  for (emb::Parameter* p : parameters()) p->zero_grad();
}

Tensor Model::encode_regions(const Tensor& raw) const {
  return projection.apply(encoder.apply(raw));
}

diff::Var Model::encode_regions(emb::Binding& bind, diff::Var raw) {
  return projection.apply(bind, encoder.apply(bind, raw));
}

}  // namespace locov
