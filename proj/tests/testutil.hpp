#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "core/model.hpp"
#include "core/tape.hpp"

namespace ts::testutil {

inline double rel_err(double a, double b, double floor = 1e-2) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Central-difference oracle for a scalar function of one array. Stays
// independent of the tape: callers evaluate f by building a fresh tape (or no
// tape at all) per call.
using ScalarFn = std::function<double(const Array&)>;

inline double fd_partial(const ScalarFn& f, const Array& x0, int64_t i, double h) {
  Array xp = x0, xm = x0;
  xp.data[i] += h;
  xm.data[i] -= h;
  return (f(xp) - f(xm)) / (2.0 * h);
}

// Max elementwise relative error between the analytic gradient and central
// differences over every element of x0.
inline double max_grad_err(const ScalarFn& f, const Array& x0, const Array& grad, double h = 1e-6) {
  double worst = 0.0;
  for (int64_t i = 0; i < x0.numel(); ++i) {
    worst = std::max(worst, rel_err(fd_partial(f, x0, i, h), grad.data[i]));
  }
  return worst;
}

// Builds a random-weight scalar readout so gradients of vector-valued ops are
// checked through a fixed linear functional.
inline Array random_weights(const std::vector<int>& shape, uint64_t seed) {
  Rng rng(seed);
  return Array::uniform(shape, -1.0, 1.0, rng);
}

// Small model configuration used across model/sampler tests.
inline ModelConfig toy_config(int d = 32, int layers = 2, int heads = 2, int s = 2, int grid = 4) {
  ModelConfig cfg;
  cfg.d = d;
  cfg.layers = layers;
  cfg.heads = heads;
  cfg.mlp_ratio = 2;
  cfg.grid_h = grid;
  cfg.grid_w = grid;
  cfg.shuffle.s = s;
  cfg.shuffle.n_blocks = 1;
  cfg.vocab = build_layout(64, 40);
  return cfg;
}

inline DatasetRecord toy_record(const ModelConfig& cfg, uint64_t seed, int caption_idx = 5) {
  DatasetRecord rec;
  rec.caption = caption_from_index(caption_idx);
  Rng rng(seed);
  rec.grid = render(rec.caption, cfg.grid_h, cfg.grid_w, 0.0, rng, cfg.vocab);
  return rec;
}

}  // namespace ts::testutil
