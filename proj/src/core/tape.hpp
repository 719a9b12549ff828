#pragma once

#include <functional>
#include <vector>

#include "array.hpp"

namespace ts {

class Tape;

// Handle to a node on a Tape. Only meaningful together with the tape that
// produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in execution order, which is a
// topological order by construction; backward() replays them in strict
// reverse, so every gradient is accumulated exactly once per pass and the
// accumulation order is fixed — runs are bitwise reproducible.
//
// A tape built with grad_enabled=false records values only (used for cached
// generation, where gradients are never needed).
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  Var leaf(Array value, bool requires_grad = false);
  Var constant(Array value) { return leaf(std::move(value), false); }

  // Escape hatch for domain modules that need an op the tape does not ship:
  // the caller provides the forward value and a backward closure that reads
  // grad(out) and accumulates into grad_mut(parent). requires-grad and
  // no-grad-mode bookkeeping are handled here.
  Var make_node(Array value, const std::vector<Var>& parents, std::function<void(Tape&, Var)> back);

  // -- linear algebra ------------------------------------------------------
  Var matmul(Var a, Var b);     // [m,k]x[k,n] -> [m,n]
  Var matmul_nt(Var a, Var b);  // [m,k]x[n,k]^T -> [m,n]

  // -- elementwise ---------------------------------------------------------
  Var add(Var a, Var b);                     // same shape
  Var add_scaled(Var a, Var b, double cb);   // a + cb * b, same shape
  Var scale(Var a, double c);
  Var mul(Var a, Var b);
  Var square(Var a);
  Var gelu(Var a);
  Var add_bias(Var x, Var bias);  // [m,n] + [n]

  // -- row-wise ------------------------------------------------------------
  Var softmax_rows(Var x);
  Var logsumexp_rows(Var x);                  // [m,n] -> [m]
  Var rms_norm(Var x, Var gain, double eps);  // normalize along last axis

  // -- shape & indexing ----------------------------------------------------
  Var reshape(Var x, std::vector<int> new_shape);
  Var gather_rows(Var table, std::vector<int> ids);
  Var permute_rows(Var x, std::vector<int> perm);  // out[i] = x[perm[i]], perm a bijection
  Var slice_rows(Var x, int start, int len);
  Var slice_cols(Var x, int start, int len);
  Var concat_rows(const std::vector<Var>& xs);
  Var concat_cols(const std::vector<Var>& xs);
  Var gather_elements(Var x, std::vector<int> col_ids);  // out[i] = x[i, col_ids[i]]

  // Rotary embedding over pair channels of each row; positions[i] is the
  // absolute position of row i. dim must be even.
  Var rope(Var x, std::vector<int> positions, double base);

  // -- reductions ----------------------------------------------------------
  Var reduce_sum(Var x);            // -> scalar [1]
  Var reduce_mean(Var x);           // -> scalar [1]
  Var dot_const(Var x, Array w);    // -> scalar, w is a fixed weight vector

  // Runs one reverse pass from a scalar loss node. Gradients of all
  // requires-grad nodes are zeroed first; parameters the loss never touched
  // keep their zero gradient.
  void backward(Var loss);

  const Array& value(Var v) const { return nodes_[check_(v)].value; }
  const Array& grad(Var v) const { return nodes_[check_(v)].grad; }
  Array& grad_mut(Var v) { return nodes_[check_(v)].grad; }
  bool requires_grad(Var v) const { return nodes_[check_(v)].requires_grad; }

 private:
  struct Node {
    Array value;
    Array grad;
    bool requires_grad = false;
    std::function<void(Tape&)> back;
  };

  int check_(Var v) const;
  Var push_(Array value, bool requires_grad, std::function<void(Tape&)> back);
  bool any_requires_(const std::vector<Var>& parents) const;
  static void check_2d_(const Array& a, const char* op);

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

}  // namespace ts
