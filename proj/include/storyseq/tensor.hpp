#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "storyseq/common.hpp"

namespace storyseq {

// Dense row-major matrix of doubles. Vectors are stored as rows x 1.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  static Tensor column(std::span<const double> values);

  std::size_t size() const { return data.size(); }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  std::span<const double> span() const { return data; }
  std::span<double> span() { return data; }
  Vec to_vec() const { return data; }

  bool operator==(const Tensor&) const = default;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

// out = W x (+ b when b is non-empty).
void matvec(const Tensor& w, std::span<const double> x, std::span<const double> b,
            std::span<double> out);
// out += W^T g
void matvec_transposed_add(const Tensor& w, std::span<const double> g, std::span<double> out);
// W += g x^T
void outer_add(std::span<const double> g, std::span<const double> x, Tensor& w);

bool all_finite(std::span<const double> a);

}  // namespace storyseq
