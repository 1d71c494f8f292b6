#include "core/tape.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "core/error.hpp"

namespace locov::diff {

const Tensor& Var::value() const { return tape->value_of(id); }
const Tensor& Var::grad() const { return tape->grad_of(id); }
bool Var::tracked() const { return tape->tracked_of(id); }

Var Tape::leaf(Tensor value, bool tracked) {
  Node n;
  n.value = std::move(value);
  n.op = tracked ? "leaf" : "const";
  n.tracked = tracked;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::emplace(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
  bool tracked = false;
  for (std::size_t i : inputs) tracked = tracked || nodes_[i].tracked;
  Node n;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.op = op;
  n.tracked = tracked;
  if (tracked) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.v.empty()) {
    n.grad.shape = n.value.shape;
    n.grad.v.assign(n.value.v.size(), 0.0);
  }
  return n.grad;
}

const Tensor& Tape::grad_of(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.v.empty()) fail("shape-mismatch", "gradient not computed for node " + std::to_string(id));
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) fail("shape-mismatch", "root belongs to another tape");
  const Node& r = nodes_[root.id];
  if (r.value.numel() != 1) fail("non-scalar-root", "backward root must be scalar, got " + r.value.shape_str());
  grad_buffer(root.id).v[0] += 1.0;
  for (std::size_t id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.tracked || !n.backward) continue;
    if (n.grad.v.empty()) continue;  // not an ancestor of the root
    n.backward(*this, id);
  }
}

namespace {

Tape& tape_of(Var a) { return *a.tape; }

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) fail("shape-mismatch", "operands live on different tapes");
}

}  // namespace

Var add(Var a, Var b) {
  require_same_tape(a, b);
  Tape& t = tape_of(a);
  Tensor out = t.value_of(a.id);
  add_into(out, t.value_of(b.id));
  return t.emplace("add", std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.tracked_of(ai)) add_into(t.grad_buffer(ai), g);
    if (t.tracked_of(bi)) add_into(t.grad_buffer(bi), g);
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& A = t.value_of(a.id);
  const Tensor& B = t.value_of(b.id);
  if (!A.same_shape(B)) fail("shape-mismatch", "sub " + A.shape_str() + " - " + B.shape_str());
  Tensor out = A;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= B.v[i];
  return t.emplace("sub", std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.tracked_of(ai)) add_into(t.grad_buffer(ai), g);
    if (t.tracked_of(bi)) add_scaled(t.grad_buffer(bi), g, -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& A = t.value_of(a.id);
  const Tensor& B = t.value_of(b.id);
  if (!A.same_shape(B)) fail("shape-mismatch", "mul " + A.shape_str() + " * " + B.shape_str());
  Tensor out = A;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= B.v[i];
  return t.emplace("mul", std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.tracked_of(ai)) {
      Tensor& da = t.grad_buffer(ai);
      const Tensor& bv = t.value_of(bi);
      for (std::size_t i = 0; i < da.v.size(); ++i) da.v[i] += g.v[i] * bv.v[i];
    }
    if (t.tracked_of(bi)) {
      Tensor& db = t.grad_buffer(bi);
      const Tensor& av = t.value_of(ai);
      for (std::size_t i = 0; i < db.v.size(); ++i) db.v[i] += g.v[i] * av.v[i];
    }
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  Tensor out = t.value_of(a.id);
  for (double& e : out.v) e *= s;
  return t.emplace("scale", std::move(out), {a.id}, [ai = a.id, s](Tape& t, std::size_t self) {
    if (t.tracked_of(ai)) add_scaled(t.grad_buffer(ai), t.grad_of(self), s);
  });
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  Tape& t = tape_of(a);
  Tensor out = locov::matmul(t.value_of(a.id), t.value_of(b.id));
  return t.emplace("matmul", std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.tracked_of(ai)) matmul_nt_acc(g, t.value_of(bi), t.grad_buffer(ai));
    if (t.tracked_of(bi)) matmul_tn_acc(t.value_of(ai), g, t.grad_buffer(bi));
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  const Tensor& A = t.value_of(a.id);
  Tensor out(A.cols(), A.rows());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) out.at(j, i) = A.at(i, j);
  return t.emplace("transpose", std::move(out), {a.id}, [ai = a.id](Tape& t, std::size_t self) {
    if (!t.tracked_of(ai)) return;
    const Tensor& g = t.grad_of(self);
    Tensor& da = t.grad_buffer(ai);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) da.at(j, i) += g.at(i, j);
  });
}

Var add_row(Var a, Var bias) {
  require_same_tape(a, bias);
  Tape& t = tape_of(a);
  const Tensor& A = t.value_of(a.id);
  const Tensor& B = t.value_of(bias.id);
  if (B.rows() != 1 || B.cols() != A.cols())
    fail("shape-mismatch", "add_row " + A.shape_str() + " + " + B.shape_str());
  Tensor out = A;
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) out.at(i, j) += B.v[j];
  return t.emplace("add_row", std::move(out), {a.id, bias.id},
                   [ai = a.id, bi = bias.id](Tape& t, std::size_t self) {
                     const Tensor& g = t.grad_of(self);
                     if (t.tracked_of(ai)) add_into(t.grad_buffer(ai), g);
                     if (t.tracked_of(bi)) {
                       Tensor& db = t.grad_buffer(bi);
                       for (std::size_t i = 0; i < g.rows(); ++i)
                         for (std::size_t j = 0; j < g.cols(); ++j) db.v[j] += g.at(i, j);
                     }
                   });
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

Var gelu(Var a) {
  Tape& t = tape_of(a);
  Tensor out = t.value_of(a.id);
  for (double& e : out.v) e = e * 0.5 * (1.0 + std::erf(e * kInvSqrt2));
  return t.emplace("gelu", std::move(out), {a.id}, [ai = a.id](Tape& t, std::size_t self) {
    if (!t.tracked_of(ai)) return;
    const Tensor& g = t.grad_of(self);
    const Tensor& x = t.value_of(ai);
    Tensor& da = t.grad_buffer(ai);
    for (std::size_t i = 0; i < x.v.size(); ++i) {
      double xi = x.v[i];
      double phi = 0.5 * (1.0 + std::erf(xi * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
      da.v[i] += g.v[i] * (phi + xi * pdf);
    }
  });
}

namespace {

void softmax_row_stable(const double* x, double* y, std::size_t n) {
  double m = x[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, x[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - m);
    z += y[j];
  }
  for (std::size_t j = 0; j < n; ++j) y[j] /= z;
}

}  // namespace

Var row_softmax(Var a) {
  Tape& t = tape_of(a);
  const Tensor& A = t.value_of(a.id);
  if (A.rows() == 0 || A.cols() == 0) fail("empty-distribution", "softmax over empty input " + A.shape_str());
  Tensor out(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.rows(); ++i)
    softmax_row_stable(A.v.data() + i * A.cols(), out.v.data() + i * A.cols(), A.cols());
  return t.emplace("row_softmax", std::move(out), {a.id}, [ai = a.id](Tape& t, std::size_t self) {
    if (!t.tracked_of(ai)) return;
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value_of(self);
    Tensor& da = t.grad_buffer(ai);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g.at(i, j) * y.at(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) da.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
    }
  });
}

Var row_log_softmax(Var a) {
  Tape& t = tape_of(a);
  const Tensor& A = t.value_of(a.id);
  if (A.rows() == 0 || A.cols() == 0) fail("empty-distribution", "log-softmax over empty input " + A.shape_str());
  Tensor out(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.rows(); ++i) {
    const double* x = A.v.data() + i * A.cols();
    double* y = out.v.data() + i * A.cols();
    double m = x[0];
    for (std::size_t j = 1; j < A.cols(); ++j) m = std::max(m, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < A.cols(); ++j) z += std::exp(x[j] - m);
    double lz = m + std::log(z);
    for (std::size_t j = 0; j < A.cols(); ++j) y[j] = x[j] - lz;
  }
  return t.emplace("row_log_softmax", std::move(out), {a.id}, [ai = a.id](Tape& t, std::size_t self) {
    if (!t.tracked_of(ai)) return;
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value_of(self);  // log-probs
    Tensor& da = t.grad_buffer(ai);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) gsum += g.at(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j)
        da.at(i, j) += g.at(i, j) - std::exp(y.at(i, j)) * gsum;
    }
  });
}

Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  require_same_tape(x, gain);
  require_same_tape(x, bias);
  Tape& t = tape_of(x);
  const Tensor& X = t.value_of(x.id);
  const Tensor& G = t.value_of(gain.id);
  const Tensor& B = t.value_of(bias.id);
  std::size_t n = X.cols();
  if (G.rows() != 1 || G.cols() != n || B.rows() != 1 || B.cols() != n)
    fail("shape-mismatch", "layer_norm gain/bias must be 1x" + std::to_string(n));
  Tensor out(X.rows(), n);
  for (std::size_t i = 0; i < X.rows(); ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += X.at(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double d = X.at(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = G.v[j] * (X.at(i, j) - mu) * inv + B.v[j];
  }
  return t.emplace("layer_norm", std::move(out), {x.id, gain.id, bias.id},
                   [xi = x.id, gi = gain.id, bi = bias.id, eps](Tape& t, std::size_t self) {
                     const Tensor& g = t.grad_of(self);
                     const Tensor& X = t.value_of(xi);
                     const Tensor& G = t.value_of(gi);
                     std::size_t n = X.cols();
                     double dn = static_cast<double>(n);
                     for (std::size_t i = 0; i < X.rows(); ++i) {
                       double mu = 0.0;
                       for (std::size_t j = 0; j < n; ++j) mu += X.at(i, j);
                       mu /= dn;
                       double var = 0.0;
                       for (std::size_t j = 0; j < n; ++j) {
                         double d = X.at(i, j) - mu;
                         var += d * d;
                       }
                       var /= dn;
                       double inv = 1.0 / std::sqrt(var + eps);
                       // dxhat, then the two mean corrections
                       double m1 = 0.0, m2 = 0.0;
                       for (std::size_t j = 0; j < n; ++j) {
                         double xh = (X.at(i, j) - mu) * inv;
                         double dxh = g.at(i, j) * G.v[j];
                         m1 += dxh;
                         m2 += dxh * xh;
                       }
                       m1 /= dn;
                       m2 /= dn;
                       if (t.tracked_of(xi)) {
                         Tensor& dx = t.grad_buffer(xi);
                         for (std::size_t j = 0; j < n; ++j) {
                           double xh = (X.at(i, j) - mu) * inv;
                           double dxh = g.at(i, j) * G.v[j];
                           dx.at(i, j) += inv * (dxh - m1 - xh * m2);
                         }
                       }
                       if (t.tracked_of(gi)) {
                         Tensor& dg = t.grad_buffer(gi);
                         for (std::size_t j = 0; j < n; ++j)
                           dg.v[j] += g.at(i, j) * (X.at(i, j) - mu) * inv;
                       }
                       if (t.tracked_of(bi)) {
                         Tensor& db = t.grad_buffer(bi);
                         for (std::size_t j = 0; j < n; ++j) db.v[j] += g.at(i, j);
                       }
                     }
                   });
}

Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) fail("shape-mismatch", "concat_rows of nothing");
  Tape& t = tape_of(xs[0]);
  std::size_t cols = t.value_of(xs[0].id).cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (Var x : xs) {
    require_same_tape(xs[0], x);
    const Tensor& X = t.value_of(x.id);
    if (X.cols() != cols) fail("shape-mismatch", "concat_rows column mismatch");
    rows += X.rows();
    ids.push_back(x.id);
  }
  Tensor out(rows, cols);
  std::size_t r = 0;
  for (Var x : xs) {
    const Tensor& X = t.value_of(x.id);
    std::copy(X.v.begin(), X.v.end(), out.v.begin() + r * cols);
    r += X.rows();
  }
  return t.emplace("concat_rows", std::move(out), ids, [ids](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    std::size_t r = 0;
    for (std::size_t id : ids) {
      const Tensor& X = t.value_of(id);
      if (t.tracked_of(id)) {
        Tensor& d = t.grad_buffer(id);
        for (std::size_t i = 0; i < X.rows(); ++i)
          for (std::size_t j = 0; j < X.cols(); ++j) d.at(i, j) += g.at(r + i, j);
      }
      r += X.rows();
    }
  });
}

Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) fail("shape-mismatch", "concat_cols of nothing");
  Tape& t = tape_of(xs[0]);
  std::size_t rows = t.value_of(xs[0].id).rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  for (Var x : xs) {
    require_same_tape(xs[0], x);
    const Tensor& X = t.value_of(x.id);
    if (X.rows() != rows) fail("shape-mismatch", "concat_cols row mismatch");
    cols += X.cols();
    ids.push_back(x.id);
  }
  Tensor out(rows, cols);
  std::size_t c = 0;
  for (Var x : xs) {
    const Tensor& X = t.value_of(x.id);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < X.cols(); ++j) out.at(i, c + j) = X.at(i, j);
    c += X.cols();
  }
  return t.emplace("concat_cols", std::move(out), ids, [ids](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    std::size_t c = 0;
    for (std::size_t id : ids) {
      const Tensor& X = t.value_of(id);
      if (t.tracked_of(id)) {
        Tensor& d = t.grad_buffer(id);
        for (std::size_t i = 0; i < X.rows(); ++i)
          for (std::size_t j = 0; j < X.cols(); ++j) d.at(i, j) += g.at(i, c + j);
      }
      c += X.cols();
    }
  });
}

Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
  Tape& t = tape_of(a);
  const Tensor& A = t.value_of(a.id);
  if (r0 > r1 || r1 > A.rows()) fail("shape-mismatch", "slice_rows out of range");
  Tensor out(r1 - r0, A.cols());
  std::copy(A.v.begin() + r0 * A.cols(), A.v.begin() + r1 * A.cols(), out.v.begin());
  return t.emplace("slice_rows", std::move(out), {a.id}, [ai = a.id, r0](Tape& t, std::size_t self) {
    if (!t.tracked_of(ai)) return;
    const Tensor& g = t.grad_of(self);
    Tensor& da = t.grad_buffer(ai);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) da.at(r0 + i, j) += g.at(i, j);
  });
}

Var take_rows(Var a, std::vector<std::size_t> idx) {
  Tape& t = tape_of(a);
  const Tensor& A = t.value_of(a.id);
  for (std::size_t i : idx)
    if (i >= A.rows()) fail("shape-mismatch", "take_rows index " + std::to_string(i) + " out of range");
  Tensor out(idx.size(), A.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(A.v.begin() + idx[i] * A.cols(), A.v.begin() + (idx[i] + 1) * A.cols(),
              out.v.begin() + i * A.cols());
  return t.emplace("take_rows", std::move(out), {a.id},
                   [ai = a.id, idx = std::move(idx)](Tape& t, std::size_t self) {
                     if (!t.tracked_of(ai)) return;
                     const Tensor& g = t.grad_of(self);
                     Tensor& da = t.grad_buffer(ai);
                     for (std::size_t i = 0; i < idx.size(); ++i)
                       for (std::size_t j = 0; j < g.cols(); ++j) da.at(idx[i], j) += g.at(i, j);
                   });
}

Var mean_rows(Var a) {
  Tape& t = tape_of(a);
  const Tensor& A = t.value_of(a.id);
  if (A.rows() == 0) fail("empty-distribution", "mean over zero rows");
  Tensor out(1, A.cols());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) out.v[j] += A.at(i, j);
  for (double& e : out.v) e /= static_cast<double>(A.rows());
  return t.emplace("mean_rows", std::move(out), {a.id}, [ai = a.id](Tape& t, std::size_t self) {
    if (!t.tracked_of(ai)) return;
    const Tensor& g = t.grad_of(self);
    Tensor& da = t.grad_buffer(ai);
    double inv = 1.0 / static_cast<double>(da.rows());
    for (std::size_t i = 0; i < da.rows(); ++i)
      for (std::size_t j = 0; j < da.cols(); ++j) da.at(i, j) += g.v[j] * inv;
  });
}

Var sum_all(Var a) {
  Tape& t = tape_of(a);
  const Tensor& A = t.value_of(a.id);
  double s = 0.0;
  for (double e : A.v) s += e;
  return t.emplace("sum_all", Tensor::scalar(s), {a.id}, [ai = a.id](Tape& t, std::size_t self) {
    if (!t.tracked_of(ai)) return;
    double g = t.grad_of(self).v[0];
    Tensor& da = t.grad_buffer(ai);
    for (double& e : da.v) e += g;
  });
}

Var mean_all(Var a) {
  Tape& t = tape_of(a);
  const Tensor& A = t.value_of(a.id);
  if (A.numel() == 0) fail("empty-distribution", "mean over empty tensor");
  double s = 0.0;
  for (double e : A.v) s += e;
  s /= static_cast<double>(A.numel());
  return t.emplace("mean_all", Tensor::scalar(s), {a.id}, [ai = a.id](Tape& t, std::size_t self) {
    if (!t.tracked_of(ai)) return;
    double g = t.grad_of(self).v[0] / static_cast<double>(t.value_of(ai).numel());
    Tensor& da = t.grad_buffer(ai);
    for (double& e : da.v) e += g;
  });
}

Var diagonal(Var a) {
  Tape& t = tape_of(a);
  const Tensor& A = t.value_of(a.id);
  if (A.rows() != A.cols()) fail("shape-mismatch", "diagonal of non-square " + A.shape_str());
  Tensor out(1, A.rows());
  for (std::size_t i = 0; i < A.rows(); ++i) out.v[i] = A.at(i, i);
  return t.emplace("diagonal", std::move(out), {a.id}, [ai = a.id](Tape& t, std::size_t self) {
    if (!t.tracked_of(ai)) return;
    const Tensor& g = t.grad_of(self);
    Tensor& da = t.grad_buffer(ai);
    for (std::size_t i = 0; i < g.cols(); ++i) da.at(i, i) += g.v[i];
  });
}

Var stack_scalars(std::size_t rows, std::size_t cols, const std::vector<Var>& cells) {
  if (cells.size() != rows * cols) fail("shape-mismatch", "stack_scalars cell count mismatch");
  Tape& t = tape_of(cells[0]);
  Tensor out(rows, cols);
  std::vector<std::size_t> ids;
  ids.reserve(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    require_same_tape(cells[0], cells[i]);
    out.v[i] = t.value_of(cells[i].id).scalar_value();
    ids.push_back(cells[i].id);
  }
  return t.emplace("stack_scalars", std::move(out), ids, [ids](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (t.tracked_of(ids[i])) t.grad_buffer(ids[i]).v[0] += g.v[i];
  });
}

Var stop_gradient(Var a) {
  Tape& t = tape_of(a);
  // value forwarded, tracking severed
  return t.constant(t.value_of(a.id));
}

Var kl_divergence(Var p, Var q, double floor) {
  require_same_tape(p, q);
  Tape& t = tape_of(p);
  const Tensor& P = t.value_of(p.id);
  const Tensor& Q = t.value_of(q.id);
  if (P.numel() == 0) fail("empty-distribution", "KL of empty distributions");
  if (!P.same_shape(Q)) fail("shape-mismatch", "KL " + P.shape_str() + " vs " + Q.shape_str());
  double s = 0.0;
  for (std::size_t i = 0; i < P.v.size(); ++i) {
    double pi = P.v[i];
    if (pi == 0.0) continue;
    double qi = std::max(Q.v[i], floor);
    s += pi * std::log(pi / qi);
  }
  return t.emplace("kl_divergence", Tensor::scalar(s), {p.id, q.id},
                   [pi_ = p.id, qi_ = q.id, floor](Tape& t, std::size_t self) {
                     double g = t.grad_of(self).v[0];
                     const Tensor& P = t.value_of(pi_);
                     const Tensor& Q = t.value_of(qi_);
                     if (t.tracked_of(pi_)) {
                       Tensor& dp = t.grad_buffer(pi_);
                       for (std::size_t i = 0; i < P.v.size(); ++i) {
                         if (P.v[i] == 0.0) continue;  // matches 0*ln0 = 0 in forward
                         double qc = std::max(Q.v[i], floor);
                         dp.v[i] += g * (std::log(P.v[i] / qc) + 1.0);
                       }
                     }
                     if (t.tracked_of(qi_)) {
                       Tensor& dq = t.grad_buffer(qi_);
                       for (std::size_t i = 0; i < Q.v.size(); ++i) {
                         if (P.v[i] == 0.0 || Q.v[i] < floor) continue;  // clamp is flat below the floor
                         dq.v[i] += -g * P.v[i] / Q.v[i];
                       }
                     }
                   });
}

Var rows_nll(Var log_probs, std::vector<std::size_t> targets) {
  Tape& t = tape_of(log_probs);
  const Tensor& L = t.value_of(log_probs.id);
  if (targets.size() != L.rows()) fail("shape-mismatch", "rows_nll target count mismatch");
  for (std::size_t ti : targets)
    if (ti >= L.cols()) fail("shape-mismatch", "rows_nll target out of range");
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) s -= L.at(i, targets[i]);
  s /= static_cast<double>(targets.size());
  return t.emplace("rows_nll", Tensor::scalar(s), {log_probs.id},
                   [li = log_probs.id, targets = std::move(targets)](Tape& t, std::size_t self) {
                     if (!t.tracked_of(li)) return;
                     double g = t.grad_of(self).v[0] / static_cast<double>(targets.size());
                     Tensor& dl = t.grad_buffer(li);
                     for (std::size_t i = 0; i < targets.size(); ++i) dl.at(i, targets[i]) -= g;
                   });
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double step) {
  Tensor g = x;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.v.size(); ++i) {
    double orig = x.v[i];
    probe.v[i] = orig + step;
    double hi = f(probe);
    probe.v[i] = orig - step;
    double lo = f(probe);
    probe.v[i] = orig;
    g.v[i] = (hi - lo) / (2.0 * step);
  }
  return g;
}

}  // namespace locov::diff
