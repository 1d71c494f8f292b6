#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "core/rng.hpp"

namespace locov {

// Dense row-major tensor of doubles. Arithmetic treats tensors as 2-D
// matrices; row vectors are 1xN and scalars 1x1. Higher-rank shapes are
// allowed for storage (grid feature maps) and flattened before math.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> v;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols) : shape{rows, cols}, v(rows * cols, 0.0) {}

  static Tensor scalar(double x);
  static Tensor row(std::vector<double> xs);
  static Tensor zeros(std::size_t r, std::size_t c) { return Tensor(r, c); }
  static Tensor full(std::size_t r, std::size_t c, double x);
  static Tensor randn(std::size_t r, std::size_t c, Rng& rng, double stddev = 1.0);

  std::size_t numel() const;
  std::size_t rows() const;  // requires rank 2
  std::size_t cols() const;
  bool is_scalar() const { return numel() == 1; }
  double scalar_value() const;

  double& at(std::size_t r, std::size_t c) { return v[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return v[r * shape[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  std::string shape_str() const;

  // collapse to 2-D with the last axis as columns; no data movement
  Tensor reshaped_2d() const;
};

Tensor matmul(const Tensor& a, const Tensor& b);

// accumulate variants used by backward passes: out += ...
void matmul_acc(const Tensor& a, const Tensor& b, Tensor& out);
void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& out);  // out += a * b^T
void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out);  // out += a^T * b

void add_into(Tensor& dst, const Tensor& src);       // dst += src
void add_scaled(Tensor& dst, const Tensor& src, double s);  // dst += s*src

}  // namespace locov
