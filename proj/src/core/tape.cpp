#include "tape.hpp"

#include <cmath>
#include <cstring>

namespace ts {

int Tape::check_(Var v) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
    throw ContractError("Tape: invalid node handle " + std::to_string(v.id));
  }
  return v.id;
}

Var Tape::push_(Array value, bool requires_grad, std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad && grad_enabled_;
  if (n.requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

bool Tape::any_requires_(const std::vector<Var>& parents) const {
  for (Var p : parents) {
    if (nodes_[check_(p)].requires_grad) return true;
  }
  return false;
}

void Tape::check_2d_(const Array& a, const char* op) {
  if (a.shape.size() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-d array, got " + Array::shape_str(a.shape));
  }
}

Var Tape::leaf(Array value, bool requires_grad) { return push_(std::move(value), requires_grad, {}); }

Var Tape::make_node(Array value, const std::vector<Var>& parents, std::function<void(Tape&, Var)> back) {
  const bool rg = any_requires_(parents);
  Var out{static_cast<int>(nodes_.size())};
  return push_(std::move(value), rg, [back = std::move(back), out](Tape& t) { back(t, out); });
}

Var Tape::matmul(Var va, Var vb) {
  const Array& a = value(va);
  const Array& b = value(vb);
  check_2d_(a, "matmul");
  check_2d_(b, "matmul");
  if (a.shape[1] != b.shape[0]) {
    throw DimensionError("matmul: inner dimensions disagree, " + Array::shape_str(a.shape) + " x " +
                         Array::shape_str(b.shape));
  }
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Array c({m, n});
  kernels::gemm(a.data.data(), b.data.data(), c.data.data(), m, k, n, false, false, false);
  Var out{size()};
  return push_(std::move(c), any_requires_({va, vb}), [va, vb, out, m, k, n](Tape& t) {
    const Array& g = t.grad(out);
    if (t.requires_grad(va)) {
      kernels::gemm(g.data.data(), t.value(vb).data.data(), t.grad_mut(va).data.data(), m, n, k, false,
                    true, true);
    }
    if (t.requires_grad(vb)) {
      kernels::gemm(t.value(va).data.data(), g.data.data(), t.grad_mut(vb).data.data(), k, m, n, true,
                    false, true);
    }
  });
}

Var Tape::matmul_nt(Var va, Var vb) {
  const Array& a = value(va);
  const Array& b = value(vb);
  check_2d_(a, "matmul_nt");
  check_2d_(b, "matmul_nt");
  if (a.shape[1] != b.shape[1]) {
    throw DimensionError("matmul_nt: inner dimensions disagree, " + Array::shape_str(a.shape) + " x " +
                         Array::shape_str(b.shape) + "^T");
  }
  const int m = a.shape[0], k = a.shape[1], n = b.shape[0];
  Array c({m, n});
  kernels::gemm(a.data.data(), b.data.data(), c.data.data(), m, k, n, false, true, false);
  Var out{size()};
  return push_(std::move(c), any_requires_({va, vb}), [va, vb, out, m, k, n](Tape& t) {
    const Array& g = t.grad(out);
    if (t.requires_grad(va)) {
      kernels::gemm(g.data.data(), t.value(vb).data.data(), t.grad_mut(va).data.data(), m, n, k, false,
                    false, true);
    }
    if (t.requires_grad(vb)) {
      kernels::gemm(g.data.data(), t.value(va).data.data(), t.grad_mut(vb).data.data(), n, m, k, true,
                    false, true);
    }
  });
}

Var Tape::add(Var a, Var b) { return add_scaled(a, b, 1.0); }

Var Tape::add_scaled(Var va, Var vb, double cb) {
  const Array& a = value(va);
  const Array& b = value(vb);
  if (!a.same_shape(b)) {
    throw DimensionError("add: shape mismatch " + Array::shape_str(a.shape) + " vs " +
                         Array::shape_str(b.shape));
  }
  Array c = a;
  for (int64_t i = 0; i < c.numel(); ++i) c.data[i] += cb * b.data[i];
  Var out{size()};
  return push_(std::move(c), any_requires_({va, vb}), [va, vb, cb, out](Tape& t) {
    const Array& g = t.grad(out);
    if (t.requires_grad(va)) {
      Array& ga = t.grad_mut(va);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
    }
    if (t.requires_grad(vb)) {
      Array& gb = t.grad_mut(vb);
      for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] += cb * g.data[i];
    }
  });
}

Var Tape::scale(Var va, double c) {
  Array y = value(va);
  for (double& v : y.data) v *= c;
  Var out{size()};
  return push_(std::move(y), any_requires_({va}), [va, c, out](Tape& t) {
    if (!t.requires_grad(va)) return;
    const Array& g = t.grad(out);
    Array& ga = t.grad_mut(va);
    for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += c * g.data[i];
  });
}

Var Tape::mul(Var va, Var vb) {
  const Array& a = value(va);
  const Array& b = value(vb);
  if (!a.same_shape(b)) {
    throw DimensionError("mul: shape mismatch " + Array::shape_str(a.shape) + " vs " +
                         Array::shape_str(b.shape));
  }
  Array c = a;
  for (int64_t i = 0; i < c.numel(); ++i) c.data[i] *= b.data[i];
  Var out{size()};
  return push_(std::move(c), any_requires_({va, vb}), [va, vb, out](Tape& t) {
    const Array& g = t.grad(out);
    if (t.requires_grad(va)) {
      Array& ga = t.grad_mut(va);
      const Array& bv = t.value(vb);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * bv.data[i];
    }
    if (t.requires_grad(vb)) {
      Array& gb = t.grad_mut(vb);
      const Array& av = t.value(va);
      for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * av.data[i];
    }
  });
}

Var Tape::square(Var va) {
  Array y = value(va);
  for (double& v : y.data) v *= v;
  Var out{size()};
  return push_(std::move(y), any_requires_({va}), [va, out](Tape& t) {
    if (!t.requires_grad(va)) return;
    const Array& g = t.grad(out);
    const Array& x = t.value(va);
    Array& ga = t.grad_mut(va);
    for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += 2.0 * x.data[i] * g.data[i];
  });
}

Var Tape::gelu(Var va) {
  Array y = value(va);
  for (double& v : y.data) v = kernels::gelu_scalar(v);
  Var out{size()};
  return push_(std::move(y), any_requires_({va}), [va, out](Tape& t) {
    if (!t.requires_grad(va)) return;
    const Array& g = t.grad(out);
    const Array& x = t.value(va);
    Array& ga = t.grad_mut(va);
    for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += kernels::gelu_grad_scalar(x.data[i]) * g.data[i];
  });
}

Var Tape::add_bias(Var vx, Var vb) {
  const Array& x = value(vx);
  const Array& b = value(vb);
  check_2d_(x, "add_bias");
  if (b.shape.size() != 1 || b.shape[0] != x.shape[1]) {
    throw DimensionError("add_bias: bias " + Array::shape_str(b.shape) + " does not match " +
                         Array::shape_str(x.shape));
  }
  const int m = x.shape[0], n = x.shape[1];
  Array y = x;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) y.data[static_cast<size_t>(i) * n + j] += b.data[j];
  Var out{size()};
  return push_(std::move(y), any_requires_({vx, vb}), [vx, vb, m, n, out](Tape& t) {
    const Array& g = t.grad(out);
    if (t.requires_grad(vx)) {
      Array& gx = t.grad_mut(vx);
      for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
    }
    if (t.requires_grad(vb)) {
      Array& gb = t.grad_mut(vb);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gb.data[j] += g.data[static_cast<size_t>(i) * n + j];
    }
  });
}

Var Tape::softmax_rows(Var vx) {
  const Array& x = value(vx);
  check_2d_(x, "softmax_rows");
  const int m = x.shape[0], n = x.shape[1];
  Array y({m, n});
  kernels::softmax_rows(x.data.data(), y.data.data(), m, n);
  Var out{size()};
  return push_(std::move(y), any_requires_({vx}), [vx, m, n, out](Tape& t) {
    if (!t.requires_grad(vx)) return;
    const Array& g = t.grad(out);
    const Array& y = t.value(out);
    Array& gx = t.grad_mut(vx);
    for (int i = 0; i < m; ++i) {
      const size_t off = static_cast<size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += g.data[off + j] * y.data[off + j];
      for (int j = 0; j < n; ++j) gx.data[off + j] += y.data[off + j] * (g.data[off + j] - dot);
    }
  });
}

Var Tape::logsumexp_rows(Var vx) {
  const Array& x = value(vx);
  check_2d_(x, "logsumexp_rows");
  const int m = x.shape[0], n = x.shape[1];
  Array y({m});
  kernels::logsumexp_rows(x.data.data(), y.data.data(), m, n);
  Var out{size()};
  return push_(std::move(y), any_requires_({vx}), [vx, m, n, out](Tape& t) {
    if (!t.requires_grad(vx)) return;
    const Array& g = t.grad(out);
    const Array& x = t.value(vx);
    const Array& lse = t.value(out);
    Array& gx = t.grad_mut(vx);
    for (int i = 0; i < m; ++i) {
      const size_t off = static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) gx.data[off + j] += g.data[i] * std::exp(x.data[off + j] - lse.data[i]);
    }
  });
}

Var Tape::rms_norm(Var vx, Var vgain, double eps) {
  const Array& x = value(vx);
  const Array& gain = value(vgain);
  if (x.shape.empty()) throw DimensionError("rms_norm: scalar input");
  const int d = x.shape.back();
  if (d < 1 || eps <= 0.0) throw ContractError("rms_norm: requires d >= 1 and eps > 0");
  if (gain.shape.size() != 1 || gain.shape[0] != d) {
    throw DimensionError("rms_norm: gain " + Array::shape_str(gain.shape) + " does not match last axis of " +
                         Array::shape_str(x.shape));
  }
  const int m = static_cast<int>(x.numel() / d);
  Array y = x;
  std::vector<double> inv(m);
  for (int i = 0; i < m; ++i) {
    const size_t off = static_cast<size_t>(i) * d;
    double ms = 0.0;
    for (int j = 0; j < d; ++j) ms += x.data[off + j] * x.data[off + j];
    inv[i] = 1.0 / std::sqrt(ms / d + eps);
    for (int j = 0; j < d; ++j) y.data[off + j] = x.data[off + j] * inv[i] * gain.data[j];
  }
  Var out{size()};
  return push_(std::move(y), any_requires_({vx, vgain}),
               [vx, vgain, m, d, inv = std::move(inv), out](Tape& t) {
                 const Array& g = t.grad(out);
                 const Array& x = t.value(vx);
                 const Array& gain = t.value(vgain);
                 for (int i = 0; i < m; ++i) {
                   const size_t off = static_cast<size_t>(i) * d;
                   if (t.requires_grad(vx)) {
                     Array& gx = t.grad_mut(vx);
                     double dot = 0.0;
                     for (int j = 0; j < d; ++j) dot += g.data[off + j] * gain.data[j] * x.data[off + j];
                     const double k = inv[i] * inv[i] * inv[i] * dot / d;
                     for (int j = 0; j < d; ++j) {
                       gx.data[off + j] += g.data[off + j] * gain.data[j] * inv[i] - x.data[off + j] * k;
                     }
                   }
                   if (t.requires_grad(vgain)) {
                     Array& gg = t.grad_mut(vgain);
                     for (int j = 0; j < d; ++j) gg.data[j] += g.data[off + j] * x.data[off + j] * inv[i];
                   }
                 }
               });
}

Var Tape::reshape(Var vx, std::vector<int> new_shape) {
  const Array& x = value(vx);
  if (Array::numel_of(new_shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + Array::shape_str(x.shape) + " as " +
                         Array::shape_str(new_shape));
  }
  Array y(new_shape, x.data);
  Var out{size()};
  return push_(std::move(y), any_requires_({vx}), [vx, out](Tape& t) {
    if (!t.requires_grad(vx)) return;
    const Array& g = t.grad(out);
    Array& gx = t.grad_mut(vx);
    for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
  });
}

Var Tape::gather_rows(Var vtable, std::vector<int> ids) {
  const Array& tab = value(vtable);
  check_2d_(tab, "gather_rows");
  const int n = tab.shape[0], d = tab.shape[1];
  for (int id : ids) {
    if (id < 0 || id >= n) {
      throw ContractError("gather_rows: row id " + std::to_string(id) + " out of range [0," +
                          std::to_string(n) + ")");
    }
  }
  Array y({static_cast<int>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    std::memcpy(&y.data[i * d], &tab.data[static_cast<size_t>(ids[i]) * d], sizeof(double) * d);
  }
  Var out{size()};
  return push_(std::move(y), any_requires_({vtable}), [vtable, ids = std::move(ids), d, out](Tape& t) {
    if (!t.requires_grad(vtable)) return;
    const Array& g = t.grad(out);
    Array& gt = t.grad_mut(vtable);
    for (size_t i = 0; i < ids.size(); ++i) {
      const size_t src = i * d, dst = static_cast<size_t>(ids[i]) * d;
      for (int j = 0; j < d; ++j) gt.data[dst + j] += g.data[src + j];
    }
  });
}

Var Tape::permute_rows(Var vx, std::vector<int> perm) {
  const Array& x = value(vx);
  check_2d_(x, "permute_rows");
  const int m = x.shape[0], d = x.shape[1];
  if (static_cast<int>(perm.size()) != m) {
    throw DimensionError("permute_rows: permutation length " + std::to_string(perm.size()) +
                         " does not match rows " + std::to_string(m));
  }
  Array y({m, d});
  for (int i = 0; i < m; ++i) {
    std::memcpy(&y.data[static_cast<size_t>(i) * d], &x.data[static_cast<size_t>(perm[i]) * d],
                sizeof(double) * d);
  }
  Var out{size()};
  return push_(std::move(y), any_requires_({vx}), [vx, perm = std::move(perm), d, out](Tape& t) {
    if (!t.requires_grad(vx)) return;
    const Array& g = t.grad(out);
    Array& gx = t.grad_mut(vx);
    for (size_t i = 0; i < perm.size(); ++i) {
      const size_t src = i * d, dst = static_cast<size_t>(perm[i]) * d;
      for (int j = 0; j < d; ++j) gx.data[dst + j] += g.data[src + j];
    }
  });
}

Var Tape::slice_rows(Var vx, int start, int len) {
  const Array& x = value(vx);
  check_2d_(x, "slice_rows");
  const int m = x.shape[0], d = x.shape[1];
  if (start < 0 || len <= 0 || start + len > m) {
    throw DimensionError("slice_rows: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of " + std::to_string(m) + " rows");
  }
  Array y({len, d});
  std::memcpy(y.data.data(), &x.data[static_cast<size_t>(start) * d], sizeof(double) * y.numel());
  Var out{size()};
  return push_(std::move(y), any_requires_({vx}), [vx, start, d, out](Tape& t) {
    if (!t.requires_grad(vx)) return;
    const Array& g = t.grad(out);
    Array& gx = t.grad_mut(vx);
    const size_t off = static_cast<size_t>(start) * d;
    for (int64_t i = 0; i < g.numel(); ++i) gx.data[off + i] += g.data[i];
  });
}

Var Tape::slice_cols(Var vx, int start, int len) {
  const Array& x = value(vx);
  check_2d_(x, "slice_cols");
  const int m = x.shape[0], n = x.shape[1];
  if (start < 0 || len <= 0 || start + len > n) {
    throw DimensionError("slice_cols: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of " + std::to_string(n) + " cols");
  }
  Array y({m, len});
  for (int i = 0; i < m; ++i) {
    std::memcpy(&y.data[static_cast<size_t>(i) * len], &x.data[static_cast<size_t>(i) * n + start],
                sizeof(double) * len);
  }
  Var out{size()};
  return push_(std::move(y), any_requires_({vx}), [vx, start, len, m, n, out](Tape& t) {
    if (!t.requires_grad(vx)) return;
    const Array& g = t.grad(out);
    Array& gx = t.grad_mut(vx);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < len; ++j) {
        gx.data[static_cast<size_t>(i) * n + start + j] += g.data[static_cast<size_t>(i) * len + j];
      }
    }
  });
}

Var Tape::concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw ContractError("concat_rows: no inputs");
  const int d = value(xs[0]).shape.size() == 2 ? value(xs[0]).shape[1] : -1;
  int m = 0;
  for (Var v : xs) {
    check_2d_(value(v), "concat_rows");
    if (value(v).shape[1] != d) {
      throw DimensionError("concat_rows: column mismatch " + Array::shape_str(value(v).shape));
    }
    m += value(v).shape[0];
  }
  Array y({m, d});
  size_t off = 0;
  for (Var v : xs) {
    const Array& x = value(v);
    std::memcpy(&y.data[off], x.data.data(), sizeof(double) * x.numel());
    off += x.numel();
  }
  Var out{size()};
  return push_(std::move(y), any_requires_(xs), [xs, out](Tape& t) {
    const Array& g = t.grad(out);
    size_t off = 0;
    for (Var v : xs) {
      const int64_t n = t.value(v).numel();
      if (t.requires_grad(v)) {
        Array& gx = t.grad_mut(v);
        for (int64_t i = 0; i < n; ++i) gx.data[i] += g.data[off + i];
      }
      off += n;
    }
  });
}

Var Tape::concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw ContractError("concat_cols: no inputs");
  const int m = value(xs[0]).shape.size() == 2 ? value(xs[0]).shape[0] : -1;
  int n = 0;
  for (Var v : xs) {
    check_2d_(value(v), "concat_cols");
    if (value(v).shape[0] != m) {
      throw DimensionError("concat_cols: row mismatch " + Array::shape_str(value(v).shape));
    }
    n += value(v).shape[1];
  }
  Array y({m, n});
  int coff = 0;
  for (Var v : xs) {
    const Array& x = value(v);
    const int w = x.shape[1];
    for (int i = 0; i < m; ++i) {
      std::memcpy(&y.data[static_cast<size_t>(i) * n + coff], &x.data[static_cast<size_t>(i) * w],
                  sizeof(double) * w);
    }
    coff += w;
  }
  Var out{size()};
  return push_(std::move(y), any_requires_(xs), [xs, m, n, out](Tape& t) {
    const Array& g = t.grad(out);
    int coff = 0;
    for (Var v : xs) {
      const int w = t.value(v).shape[1];
      if (t.requires_grad(v)) {
        Array& gx = t.grad_mut(v);
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < w; ++j) {
            gx.data[static_cast<size_t>(i) * w + j] += g.data[static_cast<size_t>(i) * n + coff + j];
          }
        }
      }
      coff += w;
    }
  });
}

Var Tape::gather_elements(Var vx, std::vector<int> col_ids) {
  const Array& x = value(vx);
  check_2d_(x, "gather_elements");
  const int m = x.shape[0], n = x.shape[1];
  if (static_cast<int>(col_ids.size()) != m) {
    throw DimensionError("gather_elements: need one column id per row");
  }
  Array y({m});
  for (int i = 0; i < m; ++i) {
    if (col_ids[i] < 0 || col_ids[i] >= n) {
      throw ContractError("gather_elements: column id " + std::to_string(col_ids[i]) + " out of range [0," +
                          std::to_string(n) + ")");
    }
    y.data[i] = x.data[static_cast<size_t>(i) * n + col_ids[i]];
  }
  Var out{size()};
  return push_(std::move(y), any_requires_({vx}), [vx, col_ids = std::move(col_ids), n, out](Tape& t) {
    if (!t.requires_grad(vx)) return;
    const Array& g = t.grad(out);
    Array& gx = t.grad_mut(vx);
    for (size_t i = 0; i < col_ids.size(); ++i) gx.data[i * n + col_ids[i]] += g.data[i];
  });
}

Var Tape::rope(Var vx, std::vector<int> positions, double base) {
  const Array& x = value(vx);
  check_2d_(x, "rope");
  const int m = x.shape[0], d = x.shape[1];
  if (d % 2 != 0) throw DimensionError("rope: dimension must be even, got " + std::to_string(d));
  if (static_cast<int>(positions.size()) != m) {
    throw DimensionError("rope: need one position per row");
  }
  const int half = d / 2;
  std::vector<double> freq(half);
  for (int j = 0; j < half; ++j) freq[j] = std::pow(base, -2.0 * j / d);
  Array y({m, d});
  for (int i = 0; i < m; ++i) {
    const size_t off = static_cast<size_t>(i) * d;
    for (int j = 0; j < half; ++j) {
      const double th = positions[i] * freq[j];
      const double c = std::cos(th), s = std::sin(th);
      const double x0 = x.data[off + 2 * j], x1 = x.data[off + 2 * j + 1];
      y.data[off + 2 * j] = x0 * c - x1 * s;
      y.data[off + 2 * j + 1] = x0 * s + x1 * c;
    }
  }
  Var out{size()};
  return push_(std::move(y), any_requires_({vx}),
               [vx, positions = std::move(positions), freq = std::move(freq), d, out](Tape& t) {
                 if (!t.requires_grad(vx)) return;
                 const Array& g = t.grad(out);
                 Array& gx = t.grad_mut(vx);
                 const int half = d / 2;
                 for (size_t i = 0; i < positions.size(); ++i) {
                   const size_t off = i * d;
                   for (int j = 0; j < half; ++j) {
                     const double th = positions[i] * freq[j];
                     const double c = std::cos(th), s = std::sin(th);
                     const double g0 = g.data[off + 2 * j], g1 = g.data[off + 2 * j + 1];
                     gx.data[off + 2 * j] += g0 * c + g1 * s;
                     gx.data[off + 2 * j + 1] += -g0 * s + g1 * c;
                   }
                 }
               });
}

Var Tape::reduce_sum(Var vx) {
  const Array& x = value(vx);
  double s = 0.0;
  for (double v : x.data) s += v;
  Var out{size()};
  return push_(Array::scalar(s), any_requires_({vx}), [vx, out](Tape& t) {
    if (!t.requires_grad(vx)) return;
    const double g = t.grad(out).data[0];
    Array& gx = t.grad_mut(vx);
    for (double& v : gx.data) v += g;
  });
}

Var Tape::reduce_mean(Var vx) {
  const Array& x = value(vx);
  const double inv = 1.0 / static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.data) s += v;
  Var out{size()};
  return push_(Array::scalar(s * inv), any_requires_({vx}), [vx, inv, out](Tape& t) {
    if (!t.requires_grad(vx)) return;
    const double g = t.grad(out).data[0] * inv;
    Array& gx = t.grad_mut(vx);
    for (double& v : gx.data) v += g;
  });
}

Var Tape::dot_const(Var vx, Array w) {
  const Array& x = value(vx);
  if (x.numel() != w.numel()) {
    throw DimensionError("dot_const: weight length " + std::to_string(w.numel()) + " does not match " +
                         Array::shape_str(x.shape));
  }
  double s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) s += x.data[i] * w.data[i];
  Var out{size()};
  return push_(Array::scalar(s), any_requires_({vx}), [vx, w = std::move(w), out](Tape& t) {
    if (!t.requires_grad(vx)) return;
    const double g = t.grad(out).data[0];
    Array& gx = t.grad_mut(vx);
    for (int64_t i = 0; i < gx.numel(); ++i) gx.data[i] += g * w.data[i];
  });
}

void Tape::backward(Var loss) {
  const int lid = check_(loss);
  if (nodes_[lid].value.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        Array::shape_str(nodes_[lid].value.shape));
  }
  if (!grad_enabled_) throw ContractError("backward: tape was built with gradients disabled");
  for (Node& n : nodes_) {
    if (n.requires_grad) {
      n.grad = Array::zeros(n.value.shape);
    } else {
      n.grad = Array();
    }
  }
  if (!nodes_[lid].requires_grad) {
    // Loss does not depend on any requires-grad leaf; all gradients stay zero.
    return;
  }
  nodes_[lid].grad.data[0] = 1.0;
  for (int i = lid; i >= 0; --i) {
    if (nodes_[i].requires_grad && nodes_[i].back) nodes_[i].back(*this);
  }
}

}  // namespace ts
