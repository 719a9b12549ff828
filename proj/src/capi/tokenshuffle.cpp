#include "tokenshuffle.h"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>

#include "core/experiments.hpp"
#include "core/harness.hpp"

using namespace ts;

struct ts_config {
  RunConfig cfg;
};

struct ts_session {
  Checkpoint ckpt;
};

namespace {

void fill_err(char* err, size_t err_len, const std::string& msg) {
  if (!err || err_len == 0) return;
  const size_t n = std::min(msg.size(), err_len - 1);
  std::memcpy(err, msg.data(), n);
  err[n] = '\0';
}

template <typename Fn>
int guarded(char* err, size_t err_len, Fn&& fn) {
  try {
    fn();
    return TS_OK;
  } catch (const ConfigError& e) {
    fill_err(err, err_len, e.what());
    return TS_ERR_CONFIG;
  } catch (const std::exception& e) {
    fill_err(err, err_len, e.what());
    return TS_ERR_RUNTIME;
  }
}

}  // namespace

extern "C" {

const char* ts_version(void) { return "tokenshuffle 1.0.0"; }

void ts_set_logger(ts_log_fn fn, void* user) {
  if (!fn) {
    set_log_sink(nullptr);
    return;
  }
  set_log_sink([fn, user](const std::string& line) { fn(line.c_str(), user); });
}

ts_config* ts_config_create(void) { return new ts_config(); }

void ts_config_destroy(ts_config* cfg) { delete cfg; }

int ts_config_load_file(ts_config* cfg, const char* path, char* err, size_t err_len) {
  return guarded(err, err_len, [&] { cfg->cfg = load_run_config(path); });
}

int ts_config_set(ts_config* cfg, const char* key, const char* value, char* err, size_t err_len) {
  return guarded(err, err_len, [&] { cfg->cfg.set(key, value); });
}

int ts_config_get(const ts_config* cfg, const char* key, char* out, size_t out_len, char* err,
                  size_t err_len) {
  return guarded(err, err_len, [&] {
    const std::string v = cfg->cfg.get(key);
    if (!out || out_len <= v.size()) throw ContractError("ts_config_get: output buffer too small");
    std::memcpy(out, v.data(), v.size());
    out[v.size()] = '\0';
  });
}

int ts_config_validate(const ts_config* cfg, char* err, size_t err_len) {
  return guarded(err, err_len, [&] { cfg->cfg.validate(); });
}

const char* ts_config_key(size_t index) {
  static const std::vector<std::string> keys = RunConfig::keys();
  if (index >= keys.size()) return nullptr;
  return keys[index].c_str();
}

int ts_gen_data(const ts_config* cfg, const char* path, char* err, size_t err_len) {
  return guarded(err, err_len, [&] {
    std::string target = path ? path : cfg->cfg.dataset;
    if (target.empty()) throw ConfigError("dataset: no output path given");
    generate_dataset(cfg->cfg, target);
  });
}

int ts_train(const ts_config* cfg, double* final_loss, char* err, size_t err_len) {
  return guarded(err, err_len, [&] {
    const TrainOutcome out = run_training(cfg->cfg);
    if (final_loss) *final_loss = out.final_loss;
  });
}

int ts_staged_train(const ts_config* const* stages, size_t n_stages, char* err, size_t err_len) {
  return guarded(err, err_len, [&] {
    std::vector<RunConfig> list;
    for (size_t i = 0; i < n_stages; ++i) list.push_back(stages[i]->cfg);
    staged_train(list);
  });
}

int ts_sweep_window(const ts_config* cfg, const int* s_values, size_t n, char* err, size_t err_len) {
  return guarded(err, err_len, [&] {
    run_window_sweep(cfg->cfg, std::vector<int>(s_values, s_values + n));
  });
}

int ts_sweep_variant(const ts_config* cfg, const char* const* variants, size_t n, char* err,
                     size_t err_len) {
  return guarded(err, err_len, [&] {
    std::vector<std::string> list(variants, variants + n);
    run_variant_sweep(cfg->cfg, list);
  });
}

int ts_probe_redundancy(const ts_config* cfg, const int* r_values, size_t n, char* err,
                        size_t err_len) {
  return guarded(err, err_len, [&] {
    run_redundancy_probe(cfg->cfg, std::vector<int>(r_values, r_values + n));
  });
}

int ts_flops_table(const ts_config* cfg, const char* csv_path, char* err, size_t err_len) {
  return guarded(err, err_len, [&] {
    cfg->cfg.validate();
    std::vector<std::pair<std::string, FlopsReport>> rows;
    CostModel cost = cost_model_from(cfg->cfg.model);
    rows.emplace_back("config", flops_estimate(cost));
    CostModel base = cost;
    base.s = 1;
    base.seq_len = base.prefix_len + base.visual_tokens + 2;
    rows.emplace_back("config_s1", flops_estimate(base));
    // Paper-scale arithmetic: 1024x1024 image, down-16 tokenizer, 2.7B model.
    CostModel paper;
    paper.d = 3072;
    paper.layers = 20;
    paper.heads = 24;
    paper.mlp_ratio = 4;
    paper.visual_tokens = 4096;
    paper.prefix_len = 64;
    paper.s = 2;
    paper.seq_len = paper.prefix_len + paper.visual_tokens / 4 + 2;
    rows.emplace_back("paper_1024_s2", flops_estimate(paper));
    CostModel paper1 = paper;
    paper1.s = 1;
    paper1.seq_len = paper1.prefix_len + paper1.visual_tokens + 2;
    rows.emplace_back("paper_1024_s1", flops_estimate(paper1));
    write_flops_csv(csv_path, rows);
    char msg[160];
    std::snprintf(msg, sizeof(msg), "flops ratio s1/s2 (paper scale): %.3f",
                  rows[3].second.transformer_train / rows[2].second.transformer_train);
    log_line(msg);
  });
}

int ts_selftest(const char* scratch_dir, char* err, size_t err_len) {
  int failures = 0;
  const int rc = guarded(err, err_len, [&] { failures = selftest(scratch_dir ? scratch_dir : "selftest_tmp"); });
  if (rc != TS_OK) return rc;
  if (failures > 0) {
    fill_err(err, err_len, std::to_string(failures) + " selftest check(s) failed");
    return TS_ERR_RUNTIME;
  }
  return TS_OK;
}

ts_session* ts_session_open(const char* checkpoint_path, char* err, size_t err_len) {
  ts_session* s = new ts_session();
  const int rc = guarded(err, err_len, [&] { s->ckpt = load_checkpoint(checkpoint_path); });
  if (rc != TS_OK) {
    delete s;
    return nullptr;
  }
  return s;
}

void ts_session_close(ts_session* s) { delete s; }

int ts_session_grid(const ts_session* s, int* h, int* w) {
  if (!s || !h || !w) return TS_ERR_RUNTIME;
  *h = s->ckpt.config.model.grid_h;
  *w = s->ckpt.config.model.grid_w;
  return TS_OK;
}

int ts_session_generate(ts_session* s, const char* caption, const char* schedule_kind, double alpha,
                        double temperature, int top_k, uint64_t seed, const char* grid_out_path,
                        const char* pgm_out_path, const char* trace_csv_path, char* err,
                        size_t err_len) {
  return guarded(err, err_len, [&] {
    const auto cap = parse_caption(caption ? caption : "");
    if (!cap) {
      throw ConfigError(std::string("caption: cannot parse '") + (caption ? caption : "") +
                        "' (want e.g. 'red square top-left')");
    }
    CFGSchedule sched;
    sched.kind = parse_schedule_kind(schedule_kind ? schedule_kind : "half_linear");
    sched.alpha_max = alpha;
    DecodeOptions opts;
    opts.temperature = temperature;
    opts.top_k = top_k;
    const ModelConfig& mc = s->ckpt.config.model;
    const GenerateResult gen =
        generate(*cap, mc, s->ckpt.params, sched, mc.grid_h, mc.grid_w, opts, seed);
    if (grid_out_path) {
      Dataset ds;
      ds.layout = mc.vocab;
      ds.seed = seed;
      ds.records.push_back({*cap, gen.grid});
      write_dataset_file(grid_out_path, ds);
    }
    if (pgm_out_path) write_pgm_file(pgm_out_path, gen.grid, mc.vocab);
    if (trace_csv_path) write_trace_csv(trace_csv_path, gen.trace);
    const DecodedCaption dec = decode_attributes(gen.grid, mc.vocab);
    log_line("generated '" + caption_text(*cap) + "' -> decoded '" + caption_text(dec.caption) +
             "' confidence " + std::to_string(dec.confidence));
  });
}

int ts_sweep_cfg(ts_session* s, const char* const* kinds, size_t n_kinds, const double* alphas,
                 size_t n_alphas, int n_samples, uint64_t seed, const char* csv_path, char* err,
                 size_t err_len) {
  return guarded(err, err_len, [&] {
    EvalOptions opts;
    opts.n_samples = n_samples;
    opts.seed = seed;
    opts.temperature = s->ckpt.config.sample_temperature;
    opts.top_k = s->ckpt.config.sample_top_k;
    const std::vector<std::string> kind_list(kinds, kinds + n_kinds);
    const std::vector<double> alpha_list(alphas, alphas + n_alphas);
    const auto rows = run_cfg_sweep(s->ckpt, kind_list, alpha_list, opts);
    write_cfg_sweep_csv(csv_path, rows);
  });
}

}  // extern "C"
