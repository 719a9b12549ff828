#pragma once

#include <optional>
#include <string>
#include <vector>

#include "params.hpp"
#include "shuffle.hpp"
#include "vocab.hpp"

namespace ts {

struct ModelConfig {
  int d = 128;
  int layers = 4;
  int heads = 4;
  int mlp_ratio = 4;
  double rope_base = 10000.0;
  bool qk_norm = false;
  double z_loss_weight = 0.0;     // 1e-5 when the stabilizer is on
  double visual_loss_weight = 1.0;
  double rms_eps = 1e-6;
  int grid_h = 16;
  int grid_w = 16;
  int redundancy_r = 0;  // dimensional-redundancy probe; 0 = off
  VocabLayout vocab = build_layout(64, 512);
  ShuffleConfig shuffle;

  int head_dim() const { return d / heads; }
  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Builds the full parameter set for a config: embedding table, optional probe,
// shuffle params, per-layer attention/MLP weights, final norm, untied output
// head. Every linear map draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) using a
// per-parameter stream derived from (seed, name), so adding or removing one
// parameter never shifts another's initialization.
ParamStore build_params(const ModelConfig& cfg, uint64_t seed);

// Token sequence split into its structural spans. prefix = [bos, caption..., soi]
// (conditional) or [bos, soi] (unconditional); suffix = [eoi, eos].
struct MixedSequence {
  std::vector<int> prefix;
  TokenGrid grid;
  std::vector<int> suffix;

  int prefix_len() const { return static_cast<int>(prefix.size()); }
  int suffix_len() const { return static_cast<int>(suffix.size()); }
  int fused_visual_len(int s) const { return grid.cells() / (s * s); }
  int fused_len(int s) const { return prefix_len() + fused_visual_len(s) + suffix_len(); }
};

MixedSequence make_sequence(const Caption& caption, const TokenGrid& grid, const VocabLayout& layout);
MixedSequence make_sequence_unconditional(const TokenGrid& grid, const VocabLayout& layout);

// Per-layer attention cache holding post-rotation keys and values, [len, d].
struct KvCache {
  std::vector<Array> k;
  std::vector<Array> v;
  int len = 0;

  explicit KvCache(int layers) : k(layers), v(layers) {}
};

// Embeds all ids, routes only the visual span through the probe (if enabled)
// and the fuse operator, and concatenates spans in order -> [fused_len, d].
Var embed_and_fuse(Tape& tape, const MixedSequence& seq, const ModelConfig& cfg,
                   const BoundParams& params);

// Pre-norm causal transformer over fused positions. With a cache, x holds only
// the new positions; their keys/values are appended to the cache.
Var transformer_forward(Tape& tape, Var x, const ModelConfig& cfg, const BoundParams& params,
                        KvCache* cache = nullptr);

// One target id per predicted logit row, in the canonical row order
// [prefix[1..], visual raster, eoi, eos].
struct TargetLayout {
  std::vector<int> targets;
  std::vector<uint8_t> visual_row;
  int rows() const { return static_cast<int>(targets.size()); }
};
TargetLayout target_layout(const MixedSequence& seq);

// Final norm, token-unshuffle over the visual span, shared output head.
// Output row t of the visual span is predicted from the transformer output at
// fused position t's window minus one (strict shift-by-one at fused
// granularity).
Var unfuse_and_project(Tape& tape, Var hidden, const MixedSequence& seq, const ModelConfig& cfg,
                       const BoundParams& params);

struct LossVars {
  Var total;
  Var ce_text;
  Var ce_visual;
  Var z_term;
  Var lse;  // per-row logsumexp, for the stability metric
};
LossVars sequence_loss(Tape& tape, Var logits, const TargetLayout& layout, const ModelConfig& cfg);

struct ForwardLoss {
  Var logits;
  TargetLayout layout;
  LossVars loss;
};
ForwardLoss forward_loss(Tape& tape, const MixedSequence& seq, const ModelConfig& cfg,
                         const BoundParams& params);

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;  // 2-d weights only
  double clip_norm = 1.0;
  double prompt_drop = 0.1;
};

struct TrainMetrics {
  double total = 0.0;
  double ce_text = 0.0;
  double ce_visual = 0.0;
  double z_term = 0.0;
  double grad_norm = 0.0;     // pre-clip global norm
  double mean_abs_lse = 0.0;  // mean |logsumexp| over all logit rows
};

// Per-element prompt-drop decisions, drawn up front in batch order.
std::vector<uint8_t> draw_prompt_drops(Rng& rng, int batch_size, double p);

// Forward + loss + backward over the batch, AdamW update. step_index is
// 1-based for bias correction. Each element independently uses the
// unconditional form with probability prompt_drop (decided up front from rng
// in batch order). lr = 0 leaves parameters bitwise unchanged.
TrainMetrics train_step(const std::vector<DatasetRecord>& batch, const ModelConfig& cfg,
                        ParamStore& store, const OptimConfig& opt, double lr, int step_index, Rng& rng);

// Mean loss over a batch without touching parameters or rng (evaluation).
TrainMetrics eval_batch(const std::vector<DatasetRecord>& batch, const ModelConfig& cfg,
                        const ParamStore& store, double uncond_fraction = 0.0);

}  // namespace ts
