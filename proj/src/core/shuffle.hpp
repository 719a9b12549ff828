#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "params.hpp"
#include "tape.hpp"

namespace ts {

enum class ShuffleVariant { kShuffle, kDrop, kSimple };
enum class ExtraPe { kNone, kLocal, kGlobal };

const char* shuffle_variant_name(ShuffleVariant v);
const char* extra_pe_name(ExtraPe pe);
ShuffleVariant parse_shuffle_variant(const std::string& s);
ExtraPe parse_extra_pe(const std::string& s);

struct ShuffleConfig {
  int s = 2;             // window size; 1 disables fusion but keeps the MLP stack
  int n_blocks = 2;      // residual MLP blocks on each side
  ShuffleVariant variant = ShuffleVariant::kShuffle;
  ExtraPe extra_pe = ExtraPe::kNone;
  bool bypass_mlp = false;  // channel-slicing mode: round trip is exact
  // Hidden width of the residual blocks; 0 = d/8 (min 8), which keeps the
  // whole module under 5% of the transformer's FLOPs at desk dims.
  int block_hidden = 0;

  int window_tokens() const { return s * s; }
  int block_hidden_for(int d) const { return block_hidden > 0 ? block_hidden : std::max(8, d / 8); }
  std::string param_prefix() const { return "ts.s" + std::to_string(s) + "."; }
};

// Raster-index permutation grouping each s x s window's tokens contiguously:
// entry k*s^2 + t is the raster index of slot t (row-major within the window)
// of fused position k (row-major over the (h/s) x (w/s) grid of windows).
std::vector<int> window_index_map(int h, int w, int s);

// Registers every parameter the configured variant needs. d is the model dim;
// (h, w) fix the fused-position count for the global positional table.
void register_shuffle_params(ParamStore& store, const ShuffleConfig& cfg, int d, int h, int w,
                             uint64_t master_seed);

// Fuse an [h*w, d] grid of token embeddings into [h*w/s^2, d] fused tokens.
// Paper operator only; variant must be kShuffle.
Var token_shuffle(Tape& tape, Var grid_embed, const ShuffleConfig& cfg, const BoundParams& params,
                  int h, int w);

// Inverse-direction operator: [h*w/s^2, d] fused features back to [h*w, d]
// per-token features in raster order.
Var token_unshuffle(Tape& tape, Var fused, const ShuffleConfig& cfg, const BoundParams& params, int h,
                    int w);

// Fig. 7 ablation variants (input side). variant must be kDrop or kSimple.
Var variant_forward(Tape& tape, Var grid_embed, const ShuffleConfig& cfg, const BoundParams& params,
                    int h, int w);

// Dispatch used by the model: token_shuffle / variant_forward by cfg.variant.
Var fuse_visual(Tape& tape, Var grid_embed, const ShuffleConfig& cfg, const BoundParams& params, int h,
                int w);
// Output-side dispatch: the simple variant uses its linear expansion, the
// shuffle and drop variants share token_unshuffle.
Var unfuse_visual(Tape& tape, Var fused, const ShuffleConfig& cfg, const BoundParams& params, int h,
                  int w);

}  // namespace ts
