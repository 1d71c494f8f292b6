#pragma once

#include <string>
#include <vector>

#include "core/tape.hpp"
#include "core/tensor.hpp"
#include "core/vocab.hpp"

namespace locov::emb {

// Named trainable tensor. Gradients accumulate into `grad` between optimizer
// steps; a frozen parameter keeps its bits untouched by training.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  void init(std::string n, Tensor v) {
    name = std::move(n);
    grad = Tensor::zeros(v.rows(), v.cols());
    value = std::move(v);
  }
  void zero_grad() {
    for (double& e : grad.v) e = 0.0;
  }
};

// Binds parameters to a tape once per forward pass so every use of the same
// parameter shares one leaf (gradients then sum across uses), and copies the
// accumulated tape gradients back out afterwards.
class Binding {
 public:
  explicit Binding(diff::Tape& tape) : tape_(tape) {}

  diff::Var operator()(Parameter& p);
  void harvest();  // adds tape grads into each bound trainable parameter

  diff::Tape& tape() { return tape_; }

 private:
  diff::Tape& tape_;
  std::vector<std::pair<Parameter*, diff::Var>> bound_;
};

// V x D token embedding rows, Gaussian init (std 0.02 by default).
struct EmbeddingTable {
  Parameter table;

  void init(std::size_t vocab, std::size_t dim, Rng& rng, double stddev = 0.02);
  std::size_t dim() const { return table.value.cols(); }
  std::size_t vocab() const { return table.value.rows(); }
};

// Stacks embedding rows for the given ids ([PAD] dropped).
Tensor embed_caption(const EmbeddingTable& table, const std::vector<std::size_t>& ids,
                     std::size_t pad_id);
diff::Var embed_caption(diff::Var table, const std::vector<std::size_t>& ids, std::size_t pad_id);

// Mean of the class-name token rows; multi-token names average.
Tensor class_embedding(const EmbeddingTable& table, const std::vector<std::size_t>& token_ids);
diff::Var class_embedding(diff::Var table, const std::vector<std::size_t>& token_ids);

// Affine map from raw feature space into the embedding space: X W + b.
struct ProjectionLayer {
  Parameter weight;  // F x D
  Parameter bias;    // 1 x D

  void init(std::size_t in_dim, std::size_t out_dim, Rng& rng);
  Tensor apply(const Tensor& x) const;
  diff::Var apply(Binding& bind, diff::Var x);
};

// Staged feature encoder standing in for a detection backbone: a fixed
// number of affine+GELU stages, freezable stage by stage.
struct RegionEncoder {
  std::vector<Parameter> weights;  // per stage, F x F
  std::vector<Parameter> biases;   // per stage, 1 x F

  void init(std::size_t dim, std::size_t stages, Rng& rng);
  std::size_t stages() const { return weights.size(); }
  Tensor apply(const Tensor& x) const;
  diff::Var apply(Binding& bind, diff::Var x);
};

}  // namespace locov::emb
