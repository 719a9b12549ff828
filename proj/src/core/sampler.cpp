#include "sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace ts {

const char* schedule_kind_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::kConstant: return "constant";
    case ScheduleKind::kLinear: return "linear";
    case ScheduleKind::kHalfLinear: return "half_linear";
  }
  return "?";
}

ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "constant") return ScheduleKind::kConstant;
  if (s == "linear") return ScheduleKind::kLinear;
  if (s == "half_linear") return ScheduleKind::kHalfLinear;
  throw ConfigError("unknown cfg schedule kind: " + s);
}

double scale_at(const CFGSchedule& schedule, int i, int n_steps) {
  if (n_steps < 1) throw ContractError("scale_at: need at least one step");
  if (i < 0 || i >= n_steps) {
    throw ContractError("scale_at: step " + std::to_string(i) + " outside [0, " +
                        std::to_string(n_steps) + ")");
  }
  switch (schedule.kind) {
    case ScheduleKind::kConstant: return schedule.alpha_max;
    case ScheduleKind::kLinear: {
      if (n_steps == 1) return schedule.alpha_max;
      return 1.0 + (static_cast<double>(i) / (n_steps - 1)) * (schedule.alpha_max - 1.0);
    }
    case ScheduleKind::kHalfLinear: {
      const int ramp = (n_steps + 1) / 2;
      if (i >= ramp || ramp == 1) return schedule.alpha_max;
      return 1.0 + (static_cast<double>(i) / (ramp - 1)) * (schedule.alpha_max - 1.0);
    }
  }
  throw ContractError("scale_at: bad schedule kind");
}

std::vector<double> guided_logits(const std::vector<double>& l_cond,
                                  const std::vector<double>& l_uncond, double alpha) {
  if (l_cond.size() != l_uncond.size()) {
    throw DimensionError("guided_logits: length mismatch " + std::to_string(l_cond.size()) + " vs " +
                         std::to_string(l_uncond.size()));
  }
  // Same affine map as uncond + alpha*(cond - uncond), evaluated so the
  // alpha=0 and alpha=1 identities are exact in floating point.
  std::vector<double> out(l_cond.size());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = (1.0 - alpha) * l_uncond[i] + alpha * l_cond[i];
  }
  return out;
}

int sample_token(const std::vector<double>& logits, double temperature, int top_k, int band_begin,
                 int band_end, Rng& rng) {
  if (band_begin < 0 || band_end > static_cast<int>(logits.size()) || band_begin >= band_end) {
    throw ContractError("sample_token: empty or invalid band [" + std::to_string(band_begin) + ", " +
                        std::to_string(band_end) + ")");
  }
  if (temperature < 0.0) throw ContractError("sample_token: negative temperature");

  int argmax = band_begin;
  for (int i = band_begin + 1; i < band_end; ++i) {
    if (logits[i] > logits[argmax]) argmax = i;
  }
  if (temperature == 0.0 || top_k == 1) return argmax;

  std::vector<int> kept;
  kept.reserve(band_end - band_begin);
  for (int i = band_begin; i < band_end; ++i) kept.push_back(i);
  if (top_k > 0 && top_k < static_cast<int>(kept.size())) {
    std::sort(kept.begin(), kept.end(), [&](int a, int b) {
      if (logits[a] != logits[b]) return logits[a] > logits[b];
      return a < b;
    });
    kept.resize(top_k);
    std::sort(kept.begin(), kept.end());
  }

  double mx = logits[kept[0]];
  for (int i : kept) mx = std::max(mx, logits[i]);
  double sum = 0.0;
  std::vector<double> p(kept.size());
  for (size_t i = 0; i < kept.size(); ++i) {
    p[i] = std::exp((logits[kept[i]] - mx) / temperature);
    sum += p[i];
  }
  const double u = rng.uniform() * sum;
  double acc = 0.0;
  for (size_t i = 0; i < kept.size(); ++i) {
    acc += p[i];
    if (u < acc) return kept[i];
  }
  return kept.back();
}

namespace {

struct PassState {
  KvCache cache;
  Array last_hidden;  // [1, d] transformer output at the newest position
  std::vector<Array> input_history;  // oracle path: every input row so far
  int prompt_len = 0;

  explicit PassState(int layers) : cache(layers) {}
};

// Forward new rows through one pass; returns the last output row. With
// use_cache=false the whole sequence is recomputed from the input history.
Array advance(Tape& tape, const BoundParams& bound, const ModelConfig& cfg, PassState& pass,
              const Array& rows, bool use_cache) {
  Var h;
  if (use_cache) {
    h = transformer_forward(tape, tape.constant(rows), cfg, bound, &pass.cache);
  } else {
    pass.input_history.push_back(rows);
    int total = 0;
    for (const Array& r : pass.input_history) total += r.shape[0];
    Array all({total, rows.shape[1]});
    size_t off = 0;
    for (const Array& r : pass.input_history) {
      std::copy(r.data.begin(), r.data.end(), all.data.begin() + off);
      off += r.data.size();
    }
    h = transformer_forward(tape, tape.constant(all), cfg, bound, nullptr);
  }
  const Array& hv = tape.value(h);
  const int d = hv.shape[1];
  Array last({1, d});
  std::copy(hv.data.end() - d, hv.data.end(), last.data.begin());
  return last;
}

// Unshuffle one window's hidden state into s^2 logit rows.
Array window_logits(Tape& tape, const BoundParams& bound, const ModelConfig& cfg,
                    const Array& last_hidden) {
  Var hn = tape.rms_norm(tape.constant(last_hidden), bound["final_norm.gain"], cfg.rms_eps);
  Var per_token = unfuse_visual(tape, hn, cfg.shuffle, bound, cfg.shuffle.s, cfg.shuffle.s);
  return tape.value(tape.matmul(per_token, bound["output.w"]));
}

// Embed one sampled window and fuse it to the next input row.
Array fuse_window_ids(Tape& tape, const BoundParams& bound, const ModelConfig& cfg,
                      const std::vector<int>& ids) {
  Var emb = tape.gather_rows(bound["embed"], ids);
  if (cfg.redundancy_r > 0) {
    emb = tape.matmul(tape.matmul(emb, bound["probe.reduce"]), bound["probe.expand"]);
  }
  return tape.value(fuse_visual(tape, emb, cfg.shuffle, bound, cfg.shuffle.s, cfg.shuffle.s));
}

double band_entropy(const std::vector<double>& logits, int begin, int end, double temperature) {
  double mx = logits[begin];
  for (int i = begin; i < end; ++i) mx = std::max(mx, logits[i]);
  const double t = temperature > 0.0 ? temperature : 1.0;
  double sum = 0.0;
  for (int i = begin; i < end; ++i) sum += std::exp((logits[i] - mx) / t);
  double h = 0.0;
  for (int i = begin; i < end; ++i) {
    const double p = std::exp((logits[i] - mx) / t) / sum;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

}  // namespace

GenerateResult generate(const Caption& caption, const ModelConfig& cfg, const ParamStore& store,
                        const CFGSchedule& schedule, int h, int w, const DecodeOptions& opts,
                        uint64_t seed) {
  const int s = cfg.shuffle.s;
  if (h % s != 0 || w % s != 0) {
    throw ContractError("generate: s=" + std::to_string(s) + " must divide grid " + std::to_string(h) +
                        "x" + std::to_string(w));
  }
  const int s2 = s * s;
  const int n_steps = (h * w) / s2;
  const std::vector<int> window_map = window_index_map(h, w, s);
  Rng rng = Rng::derive(seed, "generate");

  std::vector<int> cond_prompt{VocabLayout::kBos};
  const std::vector<int> cap = tokenize_caption(caption, cfg.vocab);
  cond_prompt.insert(cond_prompt.end(), cap.begin(), cap.end());
  cond_prompt.push_back(VocabLayout::kSoi);
  const std::vector<int> uncond_prompt{VocabLayout::kBos, VocabLayout::kSoi};

  PassState cond(cfg.layers), uncond(cfg.layers);
  cond.prompt_len = static_cast<int>(cond_prompt.size());
  uncond.prompt_len = static_cast<int>(uncond_prompt.size());
  {
    Tape tape(false);
    BoundParams bound = bind_params(tape, store, false);
    const Array cp = tape.value(tape.gather_rows(bound["embed"], cond_prompt));
    const Array up = tape.value(tape.gather_rows(bound["embed"], uncond_prompt));
    cond.last_hidden = advance(tape, bound, cfg, cond, cp, opts.use_cache);
    uncond.last_hidden = advance(tape, bound, cfg, uncond, up, opts.use_cache);
  }

  GenerateResult out;
  out.grid.h = h;
  out.grid.w = w;
  out.grid.ids.assign(static_cast<size_t>(h) * w, -1);
  out.trace.reserve(n_steps);

  const int vb = cfg.vocab.visual_begin(), ve = cfg.vocab.visual_end();
  for (int step = 0; step < n_steps; ++step) {
    Tape tape(false);
    BoundParams bound = bind_params(tape, store, false);
    const double alpha = scale_at(schedule, step, n_steps);
    const Array lc = window_logits(tape, bound, cfg, cond.last_hidden);
    const Array lu = window_logits(tape, bound, cfg, uncond.last_hidden);
    const int V = lc.shape[1];

    std::vector<int> ids(s2);
    StepTrace tr;
    tr.step = step;
    tr.alpha = alpha;
    tr.max_logit = -1e300;
    Array step_logits({s2, V});
    for (int t = 0; t < s2; ++t) {
      std::vector<double> row_c(lc.data.begin() + static_cast<size_t>(t) * V,
                                lc.data.begin() + static_cast<size_t>(t + 1) * V);
      std::vector<double> row_u(lu.data.begin() + static_cast<size_t>(t) * V,
                                lu.data.begin() + static_cast<size_t>(t + 1) * V);
      std::vector<double> g = guided_logits(row_c, row_u, alpha);
      for (double v : g) {
        if (!std::isfinite(v)) {
          throw ContractError("generate: non-finite logits at step " + std::to_string(step));
        }
      }
      for (int i = vb; i < ve; ++i) tr.max_logit = std::max(tr.max_logit, g[i]);
      tr.entropy += band_entropy(g, vb, ve, opts.temperature) / s2;
      ids[t] = sample_token(g, opts.temperature, opts.top_k, vb, ve, rng);
      if (opts.record_logits) {
        std::copy(g.begin(), g.end(), step_logits.data.begin() + static_cast<size_t>(t) * V);
      }
    }
    out.trace.push_back(tr);
    if (opts.record_logits) out.step_logits.push_back(std::move(step_logits));
    for (int t = 0; t < s2; ++t) out.grid.ids[window_map[step * s2 + t]] = ids[t];

    if (step + 1 < n_steps) {
      const Array next = fuse_window_ids(tape, bound, cfg, ids);
      cond.last_hidden = advance(tape, bound, cfg, cond, next, opts.use_cache);
      uncond.last_hidden = advance(tape, bound, cfg, uncond, next, opts.use_cache);
      if (opts.use_cache) {
        // Both passes must have consumed identical generated tokens.
        const int gen_c = cond.cache.len - cond.prompt_len;
        const int gen_u = uncond.cache.len - uncond.prompt_len;
        if (gen_c != gen_u) {
          throw ContractError("generate: CFG cache divergence at step " + std::to_string(step) + ": " +
                              std::to_string(gen_c) + " vs " + std::to_string(gen_u) +
                              " generated positions");
        }
      }
    }
  }
  return out;
}

void write_trace_csv(const std::string& path, const std::vector<StepTrace>& trace) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "step,alpha,max_logit,entropy\n";
  char buf[160];
  for (const StepTrace& t : trace) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", t.step, t.alpha, t.max_logit, t.entropy);
    os << buf;
  }
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace ts
