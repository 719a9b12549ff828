#include "array.hpp"

#include <Eigen/Core>

#include <atomic>
#include <cmath>

namespace ts::kernels {

namespace {
std::atomic<uint64_t> g_flops{0};
std::atomic<bool> g_count_flops{false};

using MatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using MutMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
}  // namespace

void flop_counter_reset() { g_flops.store(0, std::memory_order_relaxed); }
uint64_t flop_counter_read() { return g_flops.load(std::memory_order_relaxed); }
void flop_counter_enable(bool on) { g_count_flops.store(on, std::memory_order_relaxed); }

void gemm(const double* a, const double* b, double* c, int m, int k, int n, bool transpose_a,
          bool transpose_b, bool accumulate) {
  if (g_count_flops.load(std::memory_order_relaxed)) {
    g_flops.fetch_add(2ull * m * k * n, std::memory_order_relaxed);
  }
  MatMap ma(a, transpose_a ? k : m, transpose_a ? m : k);
  MatMap mb(b, transpose_b ? n : k, transpose_b ? k : n);
  MutMap mc(c, m, n);
  if (transpose_a && transpose_b) {
    if (accumulate)
      mc.noalias() += ma.transpose() * mb.transpose();
    else
      mc.noalias() = ma.transpose() * mb.transpose();
  } else if (transpose_a) {
    if (accumulate)
      mc.noalias() += ma.transpose() * mb;
    else
      mc.noalias() = ma.transpose() * mb;
  } else if (transpose_b) {
    if (accumulate)
      mc.noalias() += ma * mb.transpose();
    else
      mc.noalias() = ma * mb.transpose();
  } else {
    if (accumulate)
      mc.noalias() += ma * mb;
    else
      mc.noalias() = ma * mb;
  }
}

void softmax_rows(const double* x, double* y, int m, int n) {
  for (int i = 0; i < m; ++i) {
    const double* row = x + static_cast<size_t>(i) * n;
    double* out = y + static_cast<size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      out[j] = std::exp(row[j] - mx);
      sum += out[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < n; ++j) out[j] *= inv;
  }
}

void logsumexp_rows(const double* x, double* y, int m, int n) {
  for (int i = 0; i < m; ++i) {
    const double* row = x + static_cast<size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
    y[i] = mx + std::log(sum);
  }
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu_scalar(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad_scalar(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace ts::kernels
