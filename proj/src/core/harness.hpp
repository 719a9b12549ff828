#pragma once

#include <functional>
#include <string>
#include <vector>

#include "model.hpp"
#include "sampler.hpp"

namespace ts {

// Process-wide progress sink; the CLI installs a printer, tests leave it off.
using LogFn = std::function<void(const std::string&)>;
void set_log_sink(LogFn fn);
void log_line(const std::string& msg);

// Flat key = value run configuration. Unknown keys are rejected; validation
// runs every divisibility constraint before any compute.
struct RunConfig {
  uint64_t seed = 42;
  int steps = 1000;
  int halt_step = 0;  // stop (with checkpoint) at this step if > 0; resume later
  int batch_size = 4;
  double lr = 1e-3;
  double lr_floor = 1e-4;
  int warmup_steps = 100;
  int save_every = 1000;
  std::string dataset;
  std::string out_dir = "out";
  int dataset_size = 4096;
  double noise_p = 0.05;

  ModelConfig model;
  OptimConfig optim;

  CFGSchedule schedule;
  double sample_temperature = 1.0;
  int sample_top_k = 64;
  int sample_count = 1;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();

  void parse_text(const std::string& text);  // file contents; '#' comments
  std::string echo() const;                  // canonical serialization of all keys
  void validate() const;
};

RunConfig load_run_config(const std::string& path);

// Learning rate at a 1-based step: linear warmup then cosine to lr_floor.
double lr_at(const RunConfig& cfg, int step);

// -- checkpoints -------------------------------------------------------------
struct Checkpoint {
  RunConfig config;
  ParamStore params;
  uint64_t step = 0;
  Rng rng;
};

inline constexpr char kCheckpointMagic[4] = {'T', 'S', 'H', 'F'};
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Copies every checkpoint parameter whose name exists in dst. Matching names
// must match shapes exactly (error lists all mismatches); names absent from
// src keep their fresh initialization.
struct TransferStats {
  int transferred = 0;
  std::vector<std::string> fresh;
  std::vector<std::string> dropped;
};
TransferStats transfer_params(const ParamStore& src, ParamStore& dst);

// -- dataset generation --------------------------------------------------------
// Renders dataset_size grids over the training captions (uniformly, with
// noise_p) and writes the dataset file to `path`.
void generate_dataset(const RunConfig& cfg, const std::string& path);

// -- training ----------------------------------------------------------------
struct LossRow {
  int step = 0;
  double total = 0.0;
  double ce_text = 0.0;
  double ce_visual = 0.0;
  double zterm = 0.0;
  double grad_norm = 0.0;
  double mean_abs_lse = 0.0;
};

std::vector<LossRow> read_loss_csv(const std::string& path);
double final_window_mean(const std::vector<LossRow>& rows, int window = 100);

struct TrainOutcome {
  Checkpoint checkpoint;
  std::string checkpoint_path;
  std::string csv_path;
  double final_loss = 0.0;  // final-window mean of total
  double wall_seconds = 0.0;
};

// Runs (or resumes) a training run in cfg.out_dir: loss.csv plus
// checkpoint.tshf. Resume requires the on-disk checkpoint's config to match
// everything but `steps`.
TrainOutcome run_training(const RunConfig& cfg);

// Low-to-high-resolution staged schedule; stage k+1 initializes from stage k's
// checkpoint via transfer_params.
TrainOutcome staged_train(const std::vector<RunConfig>& stages);

// -- selftest ------------------------------------------------------------------
// Quick structural invariant suite (window-map bijection, bypass round trip,
// gradient spot checks, CFG identities, render/decode inverse, checkpoint
// round trip). Returns the number of failed checks and prints one line each.
int selftest(const std::string& scratch_dir);

}  // namespace ts
