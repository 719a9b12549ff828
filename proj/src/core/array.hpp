#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace ts {

// Dense row-major array of 64-bit floats. The one value type every module
// computes on; shape is explicit and checked by every kernel.
struct Array {
  std::vector<int> shape;
  std::vector<double> data;

  Array() = default;
  explicit Array(std::vector<int> s) : shape(std::move(s)) { data.assign(numel_of(shape), 0.0); }
  Array(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != static_cast<int64_t>(data.size())) {
      throw DimensionError("Array: shape " + shape_str(shape) + " does not match data length " +
                           std::to_string(data.size()));
    }
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d <= 0) throw DimensionError("Array: non-positive dimension in shape " + shape_str(s));
      n *= d;
    }
    return n;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(s[i]);
    }
    return out + "]";
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const {
    int64_t c = 1;
    for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
    return static_cast<int>(c);
  }

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

  static Array zeros(std::vector<int> s) { return Array(std::move(s)); }
  static Array full(std::vector<int> s, double v) {
    Array a(std::move(s));
    std::fill(a.data.begin(), a.data.end(), v);
    return a;
  }
  static Array scalar(double v) { return Array({1}, {v}); }
  static Array identity(int n) {
    Array a({n, n});
    for (int i = 0; i < n; ++i) a.at(i, i) = 1.0;
    return a;
  }
  static Array uniform(std::vector<int> s, double lo, double hi, Rng& rng) {
    Array a(std::move(s));
    for (double& v : a.data) v = rng.uniform(lo, hi);
    return a;
  }

  bool same_shape(const Array& o) const { return shape == o.shape; }
};

namespace kernels {

// Running multiply-add counter for the FLOP-accounting experiments. Counts
// GEMM work only (one multiply-add = 2 FLOPs) — the convention the cost model
// states.
void flop_counter_reset();
uint64_t flop_counter_read();
void flop_counter_enable(bool on);

// c[m,n] = a[m,k] * b[k,n]. transpose_a/b read the operand as its transpose.
void gemm(const double* a, const double* b, double* c, int m, int k, int n, bool transpose_a,
          bool transpose_b, bool accumulate);

void softmax_rows(const double* x, double* y, int m, int n);
void logsumexp_rows(const double* x, double* y, int m, int n);
double gelu_scalar(double x);
double gelu_grad_scalar(double x);

}  // namespace kernels
}  // namespace ts
