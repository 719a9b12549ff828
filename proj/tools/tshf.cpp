// tshf — command-line front end. Talks to the library exclusively through the
// C API in tokenshuffle.h.

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "tokenshuffle.h"

namespace {

bool g_quiet = false;

void log_print(const char* line, void*) {
  if (!g_quiet) std::fprintf(stderr, "%s\n", line);
}

struct ConfigHandle {
  ts_config* cfg = ts_config_create();
  ~ConfigHandle() { ts_config_destroy(cfg); }
};

int fail(int code, const char* err) {
  std::fprintf(stderr, "error: %s\n", err);
  return code;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string get_key(ts_config* cfg, const std::string& key) {
  char out[512], err[512];
  if (ts_config_get(cfg, key.c_str(), out, sizeof(out), err, sizeof(err)) != TS_OK) return "";
  return out;
}

// Registers one CLI option per config key on the subcommand; apply() pushes
// file values first, then flag overrides.
struct ConfigArgs {
  std::string config_file;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "config file (key = value lines)");
    for (size_t i = 0; const char* key = ts_config_key(i); ++i) {
      auto& slot = overrides[key];
      cmd->add_option("--" + std::string(key), slot, "config key override");
    }
  }

  int apply(ts_config* cfg) const {
    char err[512];
    if (!config_file.empty()) {
      if (ts_config_load_file(cfg, config_file.c_str(), err, sizeof(err)) != TS_OK) {
        return fail(TS_ERR_CONFIG, err);
      }
    }
    for (const auto& [key, value] : overrides) {
      if (value.empty()) continue;
      if (ts_config_set(cfg, key.c_str(), value.c_str(), err, sizeof(err)) != TS_OK) {
        return fail(TS_ERR_CONFIG, err);
      }
    }
    return TS_OK;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-Shuffle desk-scale autoregressive image generation"};
  app.require_subcommand(1);
  app.add_flag("--quiet", g_quiet, "suppress progress output");
  ts_set_logger(log_print, nullptr);

  char err[1024];
  err[0] = '\0';

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "render a synthetic caption/grid dataset");
  ConfigArgs gen_args;
  gen_args.attach(gen);
  std::string gen_out;
  gen->add_option("--out", gen_out, "dataset path (default: the dataset config key)");

  // train
  auto* train = app.add_subcommand("train", "train (resumable); writes checkpoint + loss CSV");
  ConfigArgs train_args;
  train_args.attach(train);
  std::string stages_csv;
  train->add_option("--stages", stages_csv,
                    "comma-separated stage config files; runs staged training instead");

  // sample
  auto* sample = app.add_subcommand("sample", "generate grids from a checkpoint");
  ConfigArgs sample_args;
  sample_args.attach(sample);
  std::string ckpt_path, caption;
  sample->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  sample->add_option("--caption", caption, "caption, e.g. 'red square top-left'")->required();

  // sweeps
  auto* sweep_window = app.add_subcommand("sweep-window", "matched training runs over window sizes");
  ConfigArgs win_args;
  win_args.attach(sweep_window);
  std::string s_list = "1,2,4";
  sweep_window->add_option("--s-list", s_list, "window sizes (default 1,2,4)");

  auto* sweep_variant = app.add_subcommand("sweep-variant", "matched runs over operator variants");
  ConfigArgs var_args;
  var_args.attach(sweep_variant);
  std::string variants = "shuffle,shuffle_n4,drop,simple";
  sweep_variant->add_option("--variants", variants,
                            "variant keys (shuffle, shuffle_n4, shuffle_n6, drop, simple, "
                            "shuffle_local_pe, shuffle_global_pe)");

  auto* probe = app.add_subcommand("probe-redundancy", "embedding-rank probe training runs");
  ConfigArgs probe_args;
  probe_args.attach(probe);
  std::string r_list = "1,8,32";
  probe->add_option("--r-list", r_list, "compression factors (default 1,8,32)");

  auto* sweep_cfg = app.add_subcommand("sweep-cfg", "guidance-scale accuracy table from a checkpoint");
  std::string cfg_ckpt, kinds = "constant", alphas = "1,3,7.5", cfg_out = "cfg_sweep.csv";
  int cfg_samples = 200;
  uint64_t cfg_seed = 1;
  sweep_cfg->add_option("--checkpoint", cfg_ckpt, "checkpoint file")->required();
  sweep_cfg->add_option("--kinds", kinds, "schedule kinds (constant,linear,half_linear)");
  sweep_cfg->add_option("--alphas", alphas, "alpha values");
  sweep_cfg->add_option("--samples", cfg_samples, "samples per table cell");
  sweep_cfg->add_option("--seed", cfg_seed, "evaluation seed");
  sweep_cfg->add_option("--out", cfg_out, "output CSV path");

  auto* flops = app.add_subcommand("flops", "closed-form FLOP and step-count table");
  ConfigArgs flops_args;
  flops_args.attach(flops);
  std::string flops_out;
  flops->add_option("--out", flops_out, "output CSV (default <out_dir>/flops.csv)");

  auto* selftest = app.add_subcommand("selftest", "run the structural invariant suite");
  std::string scratch = "selftest_tmp";
  selftest->add_option("--scratch", scratch, "scratch directory");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    ConfigHandle h;
    if (int rc = gen_args.apply(h.cfg)) return rc;
    const int rc = ts_gen_data(h.cfg, gen_out.empty() ? nullptr : gen_out.c_str(), err, sizeof(err));
    if (rc != TS_OK) return fail(rc, err);
    std::printf("dataset written to %s\n",
                gen_out.empty() ? get_key(h.cfg, "dataset").c_str() : gen_out.c_str());
    return 0;
  }

  if (train->parsed()) {
    if (!stages_csv.empty()) {
      std::vector<std::unique_ptr<ConfigHandle>> handles;
      std::vector<const ts_config*> stages;
      for (const std::string& path : split_list(stages_csv)) {
        auto h = std::make_unique<ConfigHandle>();
        if (ts_config_load_file(h->cfg, path.c_str(), err, sizeof(err)) != TS_OK) {
          return fail(TS_ERR_CONFIG, err);
        }
        stages.push_back(h->cfg);
        handles.push_back(std::move(h));
      }
      const int rc = ts_staged_train(stages.data(), stages.size(), err, sizeof(err));
      if (rc != TS_OK) return fail(rc, err);
      std::printf("staged training complete (%zu stages)\n", stages.size());
      return 0;
    }
    ConfigHandle h;
    if (int rc = train_args.apply(h.cfg)) return rc;
    double final_loss = 0.0;
    const int rc = ts_train(h.cfg, &final_loss, err, sizeof(err));
    if (rc != TS_OK) return fail(rc, err);
    std::printf("training complete, final loss %.6f (outputs in %s)\n", final_loss,
                get_key(h.cfg, "out_dir").c_str());
    return 0;
  }

  if (sample->parsed()) {
    ConfigHandle h;
    if (int rc = sample_args.apply(h.cfg)) return rc;
    ts_session* session = ts_session_open(ckpt_path.c_str(), err, sizeof(err));
    if (!session) return fail(TS_ERR_RUNTIME, err);
    const std::string out_dir = get_key(h.cfg, "out_dir");
    std::filesystem::create_directories(out_dir);
    const int count = std::stoi(get_key(h.cfg, "sample.count"));
    const uint64_t seed = std::stoull(get_key(h.cfg, "seed"));
    const double alpha = std::stod(get_key(h.cfg, "sample.alpha"));
    const double temperature = std::stod(get_key(h.cfg, "sample.temperature"));
    const int top_k = std::stoi(get_key(h.cfg, "sample.top_k"));
    const std::string kind = get_key(h.cfg, "sample.schedule");
    for (int i = 0; i < count; ++i) {
      const std::string base = out_dir + "/sample_" + std::to_string(i);
      const int rc = ts_session_generate(session, caption.c_str(), kind.c_str(), alpha, temperature,
                                         top_k, seed + static_cast<uint64_t>(i),
                                         (base + ".txt").c_str(), (base + ".pgm").c_str(),
                                         (base + "_trace.csv").c_str(), err, sizeof(err));
      if (rc != TS_OK) {
        ts_session_close(session);
        return fail(rc, err);
      }
      std::printf("wrote %s.txt / .pgm / _trace.csv\n", base.c_str());
    }
    ts_session_close(session);
    return 0;
  }

  if (sweep_window->parsed()) {
    ConfigHandle h;
    if (int rc = win_args.apply(h.cfg)) return rc;
    std::vector<int> s_values;
    for (const std::string& s : split_list(s_list)) s_values.push_back(std::stoi(s));
    const int rc = ts_sweep_window(h.cfg, s_values.data(), s_values.size(), err, sizeof(err));
    if (rc != TS_OK) return fail(rc, err);
    std::printf("window sweep summary: %s/window_sweep.csv\n", get_key(h.cfg, "out_dir").c_str());
    return 0;
  }

  if (sweep_variant->parsed()) {
    ConfigHandle h;
    if (int rc = var_args.apply(h.cfg)) return rc;
    const std::vector<std::string> names = split_list(variants);
    std::vector<const char*> ptrs;
    for (const std::string& n : names) ptrs.push_back(n.c_str());
    const int rc = ts_sweep_variant(h.cfg, ptrs.data(), ptrs.size(), err, sizeof(err));
    if (rc != TS_OK) return fail(rc, err);
    std::printf("variant sweep summary: %s/variant_sweep.csv\n", get_key(h.cfg, "out_dir").c_str());
    return 0;
  }

  if (probe->parsed()) {
    ConfigHandle h;
    if (int rc = probe_args.apply(h.cfg)) return rc;
    std::vector<int> r_values;
    for (const std::string& r : split_list(r_list)) r_values.push_back(std::stoi(r));
    const int rc = ts_probe_redundancy(h.cfg, r_values.data(), r_values.size(), err, sizeof(err));
    if (rc != TS_OK) return fail(rc, err);
    std::printf("probe summary: %s/redundancy_probe.csv\n", get_key(h.cfg, "out_dir").c_str());
    return 0;
  }

  if (sweep_cfg->parsed()) {
    ts_session* session = ts_session_open(cfg_ckpt.c_str(), err, sizeof(err));
    if (!session) return fail(TS_ERR_RUNTIME, err);
    const std::vector<std::string> kind_names = split_list(kinds);
    std::vector<const char*> kind_ptrs;
    for (const std::string& k : kind_names) kind_ptrs.push_back(k.c_str());
    std::vector<double> alpha_values;
    for (const std::string& a : split_list(alphas)) alpha_values.push_back(std::stod(a));
    const int rc = ts_sweep_cfg(session, kind_ptrs.data(), kind_ptrs.size(), alpha_values.data(),
                                alpha_values.size(), cfg_samples, cfg_seed, cfg_out.c_str(), err,
                                sizeof(err));
    ts_session_close(session);
    if (rc != TS_OK) return fail(rc, err);
    std::printf("cfg sweep written to %s\n", cfg_out.c_str());
    return 0;
  }

  if (flops->parsed()) {
    ConfigHandle h;
    if (int rc = flops_args.apply(h.cfg)) return rc;
    std::string out = flops_out;
    if (out.empty()) {
      const std::string dir = get_key(h.cfg, "out_dir");
      std::filesystem::create_directories(dir);
      out = dir + "/flops.csv";
    }
    const int rc = ts_flops_table(h.cfg, out.c_str(), err, sizeof(err));
    if (rc != TS_OK) return fail(rc, err);
    std::printf("flops table written to %s\n", out.c_str());
    return 0;
  }

  if (selftest->parsed()) {
    const int rc = ts_selftest(scratch.c_str(), err, sizeof(err));
    if (rc != TS_OK) return fail(rc, err);
    std::printf("selftest passed\n");
    return 0;
  }

  return 0;
}
