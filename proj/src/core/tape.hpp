#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "core/tensor.hpp"

namespace locov::diff {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  bool tracked() const;
};

// Define-by-run computation record. Nodes are appended in execution order,
// so creation order is already a topological order; backward() walks it once
// in reverse and accumulates gradients additively (fan-out sums per path).
// A fresh tape is built per forward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Var leaf(Tensor value, bool tracked);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Seeds d(root)/d(root) = 1 and propagates to every tracked ancestor.
  void backward(Var root);

  const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad_of(std::size_t id) const;
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.v.empty(); }
  bool tracked_of(std::size_t id) const { return nodes_[id].tracked; }
  const char* op_of(std::size_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

  // op-builder plumbing
  Var emplace(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);
  Tensor& grad_buffer(std::size_t id);

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated on demand during backward
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    const char* op;
    bool tracked;
  };
  std::vector<Node> nodes_;
};

// ---- primitive operations ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add_row(Var a, Var bias);  // bias (1xN) broadcast over rows
Var gelu(Var a);
Var row_softmax(Var a);      // numerically stable, max-subtracted
Var row_log_softmax(Var a);
Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5);
Var concat_rows(const std::vector<Var>& xs);
Var concat_cols(const std::vector<Var>& xs);
Var slice_rows(Var a, std::size_t r0, std::size_t r1);
Var take_rows(Var a, std::vector<std::size_t> idx);  // gather; backward scatter-adds
Var mean_rows(Var a);  // 1xN column means
Var sum_all(Var a);
Var mean_all(Var a);
Var diagonal(Var a);  // square matrix -> 1xN
Var stack_scalars(std::size_t rows, std::size_t cols, const std::vector<Var>& cells);
Var stop_gradient(Var a);

// KL(p || q) summed over all entries. q is clamped to >= floor before the
// log; zero p entries contribute nothing (0 * ln 0 = 0).
Var kl_divergence(Var p, Var q, double floor = 1e-12);

// -(1/m) sum_i logp[i, target[i]] for an m-row matrix of log-probabilities.
Var rows_nll(Var log_probs, std::vector<std::size_t> targets);

// ---- plain-tensor oracle ----
// Central differences: g[i] = (f(x + h e_i) - f(x - h e_i)) / (2h).
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double step = 1e-5);

}  // namespace locov::diff
