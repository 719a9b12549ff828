#pragma once

#include <string>
#include <vector>

#include "harness.hpp"

namespace ts {

// One completed sweep run.
struct SweepPoint {
  std::string key;
  double final_loss = 0.0;  // final-window mean of total loss
  double wall_seconds = 0.0;
  int steps = 0;
  std::string csv_path;
  std::string out_dir;
};

void write_sweep_csv(const std::string& path, const std::vector<SweepPoint>& points);

// Matched-seed training runs per shuffle window size (Fig. 8 analogue). All
// points share base.dataset; out dirs are base.out_dir/s<k>.
std::vector<SweepPoint> run_window_sweep(const RunConfig& base, const std::vector<int>& s_list);

// Design-variant comparison (Fig. 7 analogue). Variant keys: shuffle,
// shuffle_n4, shuffle_n6, drop, simple, shuffle_local_pe, shuffle_global_pe.
std::vector<SweepPoint> run_variant_sweep(const RunConfig& base,
                                          const std::vector<std::string>& variants);
RunConfig variant_config(const RunConfig& base, const std::string& variant);

// Dimensional-redundancy probe (Fig. 3 analogue): one s=1 run per compression
// factor r; r=0 means no probe at all.
std::vector<SweepPoint> run_redundancy_probe(const RunConfig& base, const std::vector<int>& r_list);

// Singular values of the probed visual embedding matrix E_vis * W_reduce *
// W_expand, descending. Rank is bounded by d/r, so values past index d/r
// vanish.
std::vector<double> probed_visual_singular_values(const ModelConfig& cfg, const ParamStore& params);

// -- conditional-generation scoring -------------------------------------------
struct EvalOptions {
  int n_samples = 200;
  double temperature = 1.0;
  int top_k = 64;
  uint64_t seed = 1;
};

// Generates over the held-out captions and scores decode_attributes per
// attribute: accuracy = mean over samples of (correct attributes / 3).
double caption_accuracy(const ModelConfig& cfg, const ParamStore& params, const CFGSchedule& schedule,
                        const EvalOptions& opts);

struct CfgSweepRow {
  std::string kind;
  double alpha = 0.0;
  double accuracy = 0.0;
  int n_samples = 0;
};

std::vector<CfgSweepRow> run_cfg_sweep(const Checkpoint& ckpt, const std::vector<std::string>& kinds,
                                       const std::vector<double>& alphas, const EvalOptions& opts);
void write_cfg_sweep_csv(const std::string& path, const std::vector<CfgSweepRow>& rows);

// -- FLOP accounting ------------------------------------------------------------
// Matmul-only convention: one multiply-add = 2 FLOPs, backward = 2x forward.
struct CostModel {
  int d = 128;
  int layers = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int64_t seq_len = 74;  // fused transformer length T
  // For the shuffle-side terms and the inference step count:
  int64_t prefix_len = 8;
  int64_t visual_tokens = 256;  // h*w before fusion
  int s = 2;
  int n_blocks = 2;
  int block_hidden = 0;  // 0 = d
};

struct FlopsReport {
  double transformer_forward = 0.0;
  double transformer_train = 0.0;  // 3x forward
  double shuffle_forward = 0.0;
  double shuffle_train = 0.0;
  int64_t inference_steps = 0;  // prefix positions + fused visual steps
};

FlopsReport flops_estimate(const CostModel& cost);
CostModel cost_model_from(const ModelConfig& cfg, bool conditional = true);

// Runs a real forward pass of the transformer blocks with the multiply-add
// counter on; the result is directly comparable to
// flops_estimate(...).transformer_forward.
double measured_transformer_forward_flops(const ModelConfig& cfg, int seq_len);

void write_flops_csv(const std::string& path, const std::vector<std::pair<std::string, FlopsReport>>& rows);

}  // namespace ts
