#include "shuffle.hpp"

namespace ts {

const char* shuffle_variant_name(ShuffleVariant v) {
  switch (v) {
    case ShuffleVariant::kShuffle: return "shuffle";
    case ShuffleVariant::kDrop: return "drop";
    case ShuffleVariant::kSimple: return "simple";
  }
  return "?";
}

const char* extra_pe_name(ExtraPe pe) {
  switch (pe) {
    case ExtraPe::kNone: return "none";
    case ExtraPe::kLocal: return "local";
    case ExtraPe::kGlobal: return "global";
  }
  return "?";
}

ShuffleVariant parse_shuffle_variant(const std::string& s) {
  if (s == "shuffle") return ShuffleVariant::kShuffle;
  if (s == "drop") return ShuffleVariant::kDrop;
  if (s == "simple") return ShuffleVariant::kSimple;
  throw ConfigError("unknown shuffle variant: " + s);
}

ExtraPe parse_extra_pe(const std::string& s) {
  if (s == "none") return ExtraPe::kNone;
  if (s == "local") return ExtraPe::kLocal;
  if (s == "global") return ExtraPe::kGlobal;
  throw ConfigError("unknown extra_pe option: " + s);
}

namespace {

void check_divisible(int h, int w, int s) {
  if (s < 1) throw ContractError("shuffle: window size s must be >= 1, got " + std::to_string(s));
  if (h % s != 0 || w % s != 0) {
    throw ContractError("shuffle: window size s=" + std::to_string(s) + " must divide grid dims h=" +
                        std::to_string(h) + ", w=" + std::to_string(w));
  }
}

void check_dim(int d, int s) {
  if (d % (s * s) != 0) {
    throw ContractError("shuffle: s^2=" + std::to_string(s * s) + " must divide model dim d=" +
                        std::to_string(d));
  }
}

// Residual two-layer GELU MLP: y = x + gelu(x W1 + b1) W2 + b2.
Var residual_block(Tape& tape, Var x, const BoundParams& params, const std::string& prefix) {
  Var h = tape.add_bias(tape.matmul(x, params[prefix + "w1"]), params[prefix + "b1"]);
  h = tape.gelu(h);
  h = tape.add_bias(tape.matmul(h, params[prefix + "w2"]), params[prefix + "b2"]);
  return tape.add(x, h);
}

Var run_blocks(Tape& tape, Var x, int n_blocks, const BoundParams& params, const std::string& side,
               const std::string& pfx) {
  for (int i = 0; i < n_blocks; ++i) {
    x = residual_block(tape, x, params, pfx + side + std::to_string(i) + ".");
  }
  return x;
}

// Within-window slot of each raster index (inverse of the index map, slot part).
std::vector<int> slot_of_raster(const std::vector<int>& perm, int s2) {
  std::vector<int> slot(perm.size());
  for (size_t j = 0; j < perm.size(); ++j) slot[perm[j]] = static_cast<int>(j) % s2;
  return slot;
}

std::vector<int> inverse_perm(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (size_t j = 0; j < perm.size(); ++j) inv[perm[j]] = static_cast<int>(j);
  return inv;
}

}  // namespace

std::vector<int> window_index_map(int h, int w, int s) {
  check_divisible(h, w, s);
  std::vector<int> perm;
  perm.reserve(static_cast<size_t>(h) * w);
  for (int wi = 0; wi < h / s; ++wi) {
    for (int wj = 0; wj < w / s; ++wj) {
      for (int a = 0; a < s; ++a) {
        for (int b = 0; b < s; ++b) {
          perm.push_back((s * wi + a) * w + (s * wj + b));
        }
      }
    }
  }
  return perm;
}

void register_shuffle_params(ParamStore& store, const ShuffleConfig& cfg, int d, int h, int w,
                             uint64_t master_seed) {
  check_divisible(h, w, cfg.s);
  check_dim(d, cfg.s);
  const int s2 = cfg.window_tokens();
  const int c = d / s2;
  const int hidden = cfg.block_hidden_for(d);
  const std::string pfx = cfg.param_prefix();

  if (cfg.variant == ShuffleVariant::kSimple) {
    store.add(pfx + "simple_in.w", {s2 * d, d}, s2 * d, master_seed);
    store.add_constant(pfx + "simple_in.b", {d}, 0.0);
    store.add(pfx + "simple_out.w", {d, s2 * d}, d, master_seed);
    store.add_constant(pfx + "simple_out.b", {s2 * d}, 0.0);
    return;
  }

  if (cfg.variant == ShuffleVariant::kShuffle && !cfg.bypass_mlp) {
    store.add(pfx + "compress.w", {d, c}, d, master_seed);
    store.add_constant(pfx + "compress.b", {c}, 0.0);
  }
  if (!cfg.bypass_mlp) {
    const auto add_blocks = [&](const std::string& side, bool enabled) {
      if (!enabled) return;
      for (int i = 0; i < cfg.n_blocks; ++i) {
        const std::string bp = pfx + side + std::to_string(i) + ".";
        store.add(bp + "w1", {d, hidden}, d, master_seed);
        store.add_constant(bp + "b1", {hidden}, 0.0);
        store.add(bp + "w2", {hidden, d}, hidden, master_seed);
        store.add_constant(bp + "b2", {d}, 0.0);
      }
    };
    // The drop variant keeps the output stack only: its input side is a pure
    // token selection.
    add_blocks("in_block", cfg.variant == ShuffleVariant::kShuffle);
    add_blocks("out_block", true);
    store.add(pfx + "expand.w", {c, d}, c, master_seed);
    store.add_constant(pfx + "expand.b", {d}, 0.0);
  }
  if (cfg.extra_pe == ExtraPe::kLocal) {
    store.add_constant(pfx + "pe_local", {s2, d}, 0.0);
  } else if (cfg.extra_pe == ExtraPe::kGlobal) {
    store.add_constant(pfx + "pe_global", {(h / cfg.s) * (w / cfg.s), d}, 0.0);
  }
}

Var token_shuffle(Tape& tape, Var grid_embed, const ShuffleConfig& cfg, const BoundParams& params,
                  int h, int w) {
  if (cfg.variant != ShuffleVariant::kShuffle) {
    throw ContractError("token_shuffle: variant must be shuffle, got " +
                        std::string(shuffle_variant_name(cfg.variant)));
  }
  const Array& x = tape.value(grid_embed);
  const int d = x.shape.size() == 2 ? x.shape[1] : -1;
  if (x.shape.size() != 2 || x.shape[0] != h * w) {
    throw DimensionError("token_shuffle: expected [" + std::to_string(h * w) + ", d] embeddings, got " +
                         Array::shape_str(x.shape));
  }
  check_divisible(h, w, cfg.s);
  check_dim(d, cfg.s);
  const int s2 = cfg.window_tokens();
  const int c = d / s2;
  const int nf = (h * w) / s2;
  const std::vector<int> perm = window_index_map(h, w, cfg.s);
  const std::string pfx = cfg.param_prefix();

  if (cfg.bypass_mlp) {
    // Channel-slicing compression: token t of each window keeps channel slice
    // [t*c, (t+1)*c); slices concatenate in window order.
    Array fused({nf, d});
    for (int k = 0; k < nf; ++k) {
      for (int t = 0; t < s2; ++t) {
        const size_t src = static_cast<size_t>(perm[k * s2 + t]) * d + static_cast<size_t>(t) * c;
        const size_t dst = static_cast<size_t>(k) * d + static_cast<size_t>(t) * c;
        for (int j = 0; j < c; ++j) fused.data[dst + j] = x.data[src + j];
      }
    }
    return tape.make_node(std::move(fused), {grid_embed},
                          [grid_embed, perm, s2, c, d, nf](Tape& t, Var out) {
                            if (!t.requires_grad(grid_embed)) return;
                            const Array& g = t.grad(out);
                            Array& gx = t.grad_mut(grid_embed);
                            for (int k = 0; k < nf; ++k) {
                              for (int tt = 0; tt < s2; ++tt) {
                                const size_t dst = static_cast<size_t>(perm[k * s2 + tt]) * d +
                                                   static_cast<size_t>(tt) * c;
                                const size_t src =
                                    static_cast<size_t>(k) * d + static_cast<size_t>(tt) * c;
                                for (int j = 0; j < c; ++j) gx.data[dst + j] += g.data[src + j];
                              }
                            }
                          });
  }

  Var tokens = grid_embed;
  if (cfg.extra_pe == ExtraPe::kLocal) {
    std::vector<int> slots = slot_of_raster(perm, s2);
    tokens = tape.add(tokens, tape.gather_rows(params[pfx + "pe_local"], std::move(slots)));
  }
  Var compressed = tape.add_bias(tape.matmul(tokens, params[pfx + "compress.w"]), params[pfx + "compress.b"]);
  Var fused = tape.reshape(tape.permute_rows(compressed, perm), {nf, d});
  if (cfg.extra_pe == ExtraPe::kGlobal) {
    fused = tape.add(fused, params[pfx + "pe_global"]);
  }
  return run_blocks(tape, fused, cfg.n_blocks, params, "in_block", pfx);
}

Var token_unshuffle(Tape& tape, Var fused, const ShuffleConfig& cfg, const BoundParams& params, int h,
                    int w) {
  const Array& y = tape.value(fused);
  const int d = y.shape.size() == 2 ? y.shape[1] : -1;
  check_divisible(h, w, cfg.s);
  check_dim(d, cfg.s);
  const int s2 = cfg.window_tokens();
  const int c = d / s2;
  const int nf = (h * w) / s2;
  if (y.shape.size() != 2 || y.shape[0] != nf) {
    throw DimensionError("token_unshuffle: expected [" + std::to_string(nf) + ", d] fused tokens, got " +
                         Array::shape_str(y.shape));
  }
  const std::vector<int> perm = window_index_map(h, w, cfg.s);
  const std::string pfx = cfg.param_prefix();

  if (cfg.bypass_mlp) {
    // Exact inverse of the bypass fuse: chunk t of window k lands in its
    // channel slice of an otherwise zero token at the original raster row.
    Array out({h * w, d});
    for (int k = 0; k < nf; ++k) {
      for (int t = 0; t < s2; ++t) {
        const size_t src = static_cast<size_t>(k) * d + static_cast<size_t>(t) * c;
        const size_t dst = static_cast<size_t>(perm[k * s2 + t]) * d + static_cast<size_t>(t) * c;
        for (int j = 0; j < c; ++j) out.data[dst + j] = y.data[src + j];
      }
    }
    return tape.make_node(std::move(out), {fused}, [fused, perm, s2, c, d, nf](Tape& t, Var outv) {
      if (!t.requires_grad(fused)) return;
      const Array& g = t.grad(outv);
      Array& gy = t.grad_mut(fused);
      for (int k = 0; k < nf; ++k) {
        for (int tt = 0; tt < s2; ++tt) {
          const size_t dst = static_cast<size_t>(k) * d + static_cast<size_t>(tt) * c;
          const size_t src =
              static_cast<size_t>(perm[k * s2 + tt]) * d + static_cast<size_t>(tt) * c;
          for (int j = 0; j < c; ++j) gy.data[dst + j] += g.data[src + j];
        }
      }
    });
  }

  Var x = run_blocks(tape, fused, cfg.n_blocks, params, "out_block", pfx);
  Var raster = tape.permute_rows(tape.reshape(x, {h * w, c}), inverse_perm(perm));
  return tape.add_bias(tape.matmul(raster, params[pfx + "expand.w"]), params[pfx + "expand.b"]);
}

Var variant_forward(Tape& tape, Var grid_embed, const ShuffleConfig& cfg, const BoundParams& params,
                    int h, int w) {
  if (cfg.variant == ShuffleVariant::kShuffle) {
    throw ContractError("variant_forward: handles drop/simple only; use token_shuffle");
  }
  const Array& x = tape.value(grid_embed);
  const int d = x.shape.size() == 2 ? x.shape[1] : -1;
  if (x.shape.size() != 2 || x.shape[0] != h * w) {
    throw DimensionError("variant_forward: expected [" + std::to_string(h * w) + ", d], got " +
                         Array::shape_str(x.shape));
  }
  check_divisible(h, w, cfg.s);
  check_dim(d, cfg.s);
  const int s2 = cfg.window_tokens();
  const int nf = (h * w) / s2;
  const std::vector<int> perm = window_index_map(h, w, cfg.s);
  const std::string pfx = cfg.param_prefix();

  if (cfg.variant == ShuffleVariant::kDrop) {
    std::vector<int> last(nf);
    for (int k = 0; k < nf; ++k) last[k] = perm[k * s2 + s2 - 1];
    return tape.gather_rows(grid_embed, std::move(last));
  }
  // simple: concatenate raw window embeddings, one linear map, nothing else.
  Var grouped = tape.reshape(tape.permute_rows(grid_embed, perm), {nf, s2 * d});
  return tape.add_bias(tape.matmul(grouped, params[pfx + "simple_in.w"]), params[pfx + "simple_in.b"]);
}

Var fuse_visual(Tape& tape, Var grid_embed, const ShuffleConfig& cfg, const BoundParams& params, int h,
                int w) {
  if (cfg.variant == ShuffleVariant::kShuffle) {
    return token_shuffle(tape, grid_embed, cfg, params, h, w);
  }
  return variant_forward(tape, grid_embed, cfg, params, h, w);
}

Var unfuse_visual(Tape& tape, Var fused, const ShuffleConfig& cfg, const BoundParams& params, int h,
                  int w) {
  if (cfg.variant == ShuffleVariant::kSimple) {
    const Array& y = tape.value(fused);
    const int d = y.shape[1];
    const int s2 = cfg.window_tokens();
    const int nf = (h * w) / s2;
    if (y.shape[0] != nf) {
      throw DimensionError("unfuse_visual: expected [" + std::to_string(nf) + ", d] fused tokens, got " +
                           Array::shape_str(y.shape));
    }
    const std::string pfx = cfg.param_prefix();
    Var expanded =
        tape.add_bias(tape.matmul(fused, params[pfx + "simple_out.w"]), params[pfx + "simple_out.b"]);
    return tape.permute_rows(tape.reshape(expanded, {h * w, d}),
                             inverse_perm(window_index_map(h, w, cfg.s)));
  }
  return token_unshuffle(tape, fused, cfg, params, h, w);
}

}  // namespace ts
