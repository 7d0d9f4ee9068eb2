#include "storyseq/tensor.hpp"

#include <cmath>
#include <string>

namespace storyseq {

Tensor Tensor::column(std::span<const double> values) {
  Tensor t(values.size(), 1);
  std::copy(values.begin(), values.end(), t.data.begin());
  return t;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error("dot: length mismatch " + std::to_string(a.size()) + " vs " +
                std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

void matvec(const Tensor& w, std::span<const double> x, std::span<const double> b,
            std::span<double> out) {
  if (w.cols != x.size() || w.rows != out.size() || (!b.empty() && b.size() != w.rows)) {
    throw Error("matvec: shape mismatch (" + std::to_string(w.rows) + "x" +
                std::to_string(w.cols) + " by " + std::to_string(x.size()) + ")");
  }
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* row = w.data.data() + r * w.cols;
    double s = b.empty() ? 0.0 : b[r];
    for (std::size_t c = 0; c < w.cols; ++c) s += row[c] * x[c];
    out[r] = s;
  }
}

void matvec_transposed_add(const Tensor& w, std::span<const double> g, std::span<double> out) {
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    const double* row = w.data.data() + r * w.cols;
    for (std::size_t c = 0; c < w.cols; ++c) out[c] += row[c] * gr;
  }
}

void outer_add(std::span<const double> g, std::span<const double> x, Tensor& w) {
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    double* row = w.data.data() + r * w.cols;
    for (std::size_t c = 0; c < w.cols; ++c) row[c] += gr * x[c];
  }
}

bool all_finite(std::span<const double> a) {
  for (double v : a) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace storyseq
