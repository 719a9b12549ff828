#pragma once

#include <string>
#include <vector>

#include "model.hpp"

namespace ts {

enum class ScheduleKind { kConstant, kLinear, kHalfLinear };

const char* schedule_kind_name(ScheduleKind k);
ScheduleKind parse_schedule_kind(const std::string& s);

// Per-position guidance schedule. constant holds alpha_max everywhere; linear
// ramps 1 -> alpha_max across all N steps; half_linear ramps over the first
// ceil(N/2) steps and holds alpha_max after.
struct CFGSchedule {
  ScheduleKind kind = ScheduleKind::kHalfLinear;
  double alpha_max = 7.5;
};

double scale_at(const CFGSchedule& schedule, int i, int n_steps);

// l_uncond + alpha * (l_cond - l_uncond), elementwise.
std::vector<double> guided_logits(const std::vector<double>& l_cond,
                                  const std::vector<double>& l_uncond, double alpha);

// Masks logits outside [band_begin, band_end), divides by temperature, keeps
// the top_k in-band entries, samples from the renormalized softmax.
// temperature == 0 or top_k == 1 selects the in-band argmax (lowest id wins
// ties). top_k <= 0 keeps the whole band.
int sample_token(const std::vector<double>& logits, double temperature, int top_k, int band_begin,
                 int band_end, Rng& rng);

struct DecodeOptions {
  double temperature = 1.0;
  int top_k = 64;
  bool use_cache = true;      // false = full recompute every step (oracle path)
  bool record_logits = false; // keep per-step guided logits for fidelity checks
};

struct StepTrace {
  int step = 0;
  double alpha = 0.0;
  double max_logit = 0.0;  // max guided in-band logit across the window's rows
  double entropy = 0.0;    // mean softmax entropy (nats) across the window's rows
};

struct GenerateResult {
  TokenGrid grid;
  std::vector<StepTrace> trace;
  std::vector<Array> step_logits;  // when record_logits: [s^2, V] per step
};

// Autoregressive generation with dual-pass classifier-free guidance. Builds
// conditional prompt [bos, caption, soi] and unconditional prompt [bos, soi],
// runs h*w/s^2 fused steps, and terminates by count — every emitted id is
// restricted to the visual band. Fixed seed gives a bitwise-identical grid.
GenerateResult generate(const Caption& caption, const ModelConfig& cfg, const ParamStore& store,
                        const CFGSchedule& schedule, int h, int w, const DecodeOptions& opts,
                        uint64_t seed);

void write_trace_csv(const std::string& path, const std::vector<StepTrace>& trace);

}  // namespace ts
