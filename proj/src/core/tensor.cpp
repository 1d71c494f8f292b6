#include "core/tensor.hpp"

#include <cmath>
#include <sstream>

#include "core/error.hpp"

namespace locov {

Tensor Tensor::scalar(double x) {
  Tensor t(1, 1);
  t.v[0] = x;
  return t;
}

Tensor Tensor::row(std::vector<double> xs) {
  Tensor t;
  t.shape = {1, xs.size()};
  t.v = std::move(xs);
  return t;
}

Tensor Tensor::full(std::size_t r, std::size_t c, double x) {
  Tensor t(r, c);
  for (double& e : t.v) e = x;
  return t;
}

Tensor Tensor::randn(std::size_t r, std::size_t c, Rng& rng, double stddev) {
  Tensor t(r, c);
  for (double& e : t.v) e = rng.normal(0.0, stddev);
  return t;
}

std::size_t Tensor::numel() const {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::size_t Tensor::rows() const {
  if (shape.size() != 2) fail("shape-mismatch", "expected rank-2 tensor, got " + shape_str());
  return shape[0];
}

std::size_t Tensor::cols() const {
  if (shape.size() != 2) fail("shape-mismatch", "expected rank-2 tensor, got " + shape_str());
  return shape[1];
}

double Tensor::scalar_value() const {
  if (numel() != 1) fail("shape-mismatch", "expected scalar, got " + shape_str());
  return v[0];
}

bool Tensor::all_finite() const {
  for (double e : v)
    if (!std::isfinite(e)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor Tensor::reshaped_2d() const {
  if (shape.size() == 2) return *this;
  if (shape.empty()) fail("shape-mismatch", "cannot reshape empty tensor");
  std::size_t cols = shape.back();
  Tensor t = *this;
  t.shape = {numel() / cols, cols};
  return t;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.cols());
  matmul_acc(a, b, out);
  return out;
}

void matmul_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k || out.rows() != m || out.cols() != n)
    fail("shape-mismatch", "matmul " + a.shape_str() + " * " + b.shape_str());
  const double* pa = a.v.data();
  const double* pb = b.v.data();
  double* po = out.v.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* ra = pa + i * k;
    double* ro = po + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      double x = ra[l];
      const double* rb = pb + l * n;
      for (std::size_t j = 0; j < n; ++j) ro[j] += x * rb[j];
    }
  }
}

void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k || out.rows() != m || out.cols() != n)
    fail("shape-mismatch", "matmul_nt " + a.shape_str() + " * " + b.shape_str() + "^T");
  for (std::size_t i = 0; i < m; ++i) {
    const double* ra = a.v.data() + i * k;
    double* ro = out.v.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* rb = b.v.data() + j * k;
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += ra[l] * rb[l];
      ro[j] += acc;
    }
  }
}

void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k || out.rows() != m || out.cols() != n)
    fail("shape-mismatch", "matmul_tn " + a.shape_str() + "^T * " + b.shape_str());
  for (std::size_t l = 0; l < k; ++l) {
    const double* ra = a.v.data() + l * m;
    const double* rb = b.v.data() + l * n;
    for (std::size_t i = 0; i < m; ++i) {
      double x = ra[i];
      double* ro = out.v.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) ro[j] += x * rb[j];
    }
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  if (!dst.same_shape(src)) fail("shape-mismatch", "add " + dst.shape_str() + " += " + src.shape_str());
  for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

void add_scaled(Tensor& dst, const Tensor& src, double s) {
  if (!dst.same_shape(src)) fail("shape-mismatch", "add_scaled " + dst.shape_str() + " += " + src.shape_str());
  for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += s * src.v[i];
}

}  // namespace locov
