#include "harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace ts {

namespace {
LogFn g_log;
}

void set_log_sink(LogFn fn) { g_log = std::move(fn); }
void log_line(const std::string& msg) {
  if (g_log) g_log(msg);
}

// -- RunConfig ----------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const int out = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const uint64_t out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& v) {
  if (key == "seed") seed = parse_u64(key, v);
  else if (key == "steps") steps = parse_int(key, v);
  else if (key == "halt_step") halt_step = parse_int(key, v);
  else if (key == "batch_size") batch_size = parse_int(key, v);
  else if (key == "lr") lr = parse_double(key, v);
  else if (key == "lr_floor") lr_floor = parse_double(key, v);
  else if (key == "warmup_steps") warmup_steps = parse_int(key, v);
  else if (key == "save_every") save_every = parse_int(key, v);
  else if (key == "dataset") dataset = v;
  else if (key == "out_dir") out_dir = v;
  else if (key == "dataset_size") dataset_size = parse_int(key, v);
  else if (key == "noise_p") noise_p = parse_double(key, v);
  else if (key == "model.d") model.d = parse_int(key, v);
  else if (key == "model.layers") model.layers = parse_int(key, v);
  else if (key == "model.heads") model.heads = parse_int(key, v);
  else if (key == "model.mlp_ratio") model.mlp_ratio = parse_int(key, v);
  else if (key == "model.rope_base") model.rope_base = parse_double(key, v);
  else if (key == "model.qk_norm") model.qk_norm = parse_bool(key, v);
  else if (key == "model.z_loss_weight") model.z_loss_weight = parse_double(key, v);
  else if (key == "model.visual_loss_weight") model.visual_loss_weight = parse_double(key, v);
  else if (key == "model.rms_eps") model.rms_eps = parse_double(key, v);
  else if (key == "grid.h") model.grid_h = parse_int(key, v);
  else if (key == "grid.w") model.grid_w = parse_int(key, v);
  else if (key == "probe.r") model.redundancy_r = parse_int(key, v);
  else if (key == "vocab.text_size") model.vocab.text_size = parse_int(key, v);
  else if (key == "vocab.visual_size") model.vocab.visual_size = parse_int(key, v);
  else if (key == "shuffle.s") model.shuffle.s = parse_int(key, v);
  else if (key == "shuffle.n_blocks") model.shuffle.n_blocks = parse_int(key, v);
  else if (key == "shuffle.variant") model.shuffle.variant = parse_shuffle_variant(v);
  else if (key == "shuffle.extra_pe") model.shuffle.extra_pe = parse_extra_pe(v);
  else if (key == "shuffle.bypass_mlp") model.shuffle.bypass_mlp = parse_bool(key, v);
  else if (key == "shuffle.block_hidden") model.shuffle.block_hidden = parse_int(key, v);
  else if (key == "opt.beta1") optim.beta1 = parse_double(key, v);
  else if (key == "opt.beta2") optim.beta2 = parse_double(key, v);
  else if (key == "opt.eps") optim.eps = parse_double(key, v);
  else if (key == "opt.weight_decay") optim.weight_decay = parse_double(key, v);
  else if (key == "opt.clip_norm") optim.clip_norm = parse_double(key, v);
  else if (key == "opt.prompt_drop") optim.prompt_drop = parse_double(key, v);
  else if (key == "sample.schedule") schedule.kind = parse_schedule_kind(v);
  else if (key == "sample.alpha") schedule.alpha_max = parse_double(key, v);
  else if (key == "sample.temperature") sample_temperature = parse_double(key, v);
  else if (key == "sample.top_k") sample_top_k = parse_int(key, v);
  else if (key == "sample.count") sample_count = parse_int(key, v);
  else throw ConfigError("unknown config key: " + key);
}

std::string RunConfig::get(const std::string& key) const {
  if (key == "seed") return std::to_string(seed);
  if (key == "steps") return std::to_string(steps);
  if (key == "halt_step") return std::to_string(halt_step);
  if (key == "batch_size") return std::to_string(batch_size);
  if (key == "lr") return fmt_double(lr);
  if (key == "lr_floor") return fmt_double(lr_floor);
  if (key == "warmup_steps") return std::to_string(warmup_steps);
  if (key == "save_every") return std::to_string(save_every);
  if (key == "dataset") return dataset;
  if (key == "out_dir") return out_dir;
  if (key == "dataset_size") return std::to_string(dataset_size);
  if (key == "noise_p") return fmt_double(noise_p);
  if (key == "model.d") return std::to_string(model.d);
  if (key == "model.layers") return std::to_string(model.layers);
  if (key == "model.heads") return std::to_string(model.heads);
  if (key == "model.mlp_ratio") return std::to_string(model.mlp_ratio);
  if (key == "model.rope_base") return fmt_double(model.rope_base);
  if (key == "model.qk_norm") return model.qk_norm ? "true" : "false";
  if (key == "model.z_loss_weight") return fmt_double(model.z_loss_weight);
  if (key == "model.visual_loss_weight") return fmt_double(model.visual_loss_weight);
  if (key == "model.rms_eps") return fmt_double(model.rms_eps);
  if (key == "grid.h") return std::to_string(model.grid_h);
  if (key == "grid.w") return std::to_string(model.grid_w);
  if (key == "probe.r") return std::to_string(model.redundancy_r);
  if (key == "vocab.text_size") return std::to_string(model.vocab.text_size);
  if (key == "vocab.visual_size") return std::to_string(model.vocab.visual_size);
  if (key == "shuffle.s") return std::to_string(model.shuffle.s);
  if (key == "shuffle.n_blocks") return std::to_string(model.shuffle.n_blocks);
  if (key == "shuffle.variant") return shuffle_variant_name(model.shuffle.variant);
  if (key == "shuffle.extra_pe") return extra_pe_name(model.shuffle.extra_pe);
  if (key == "shuffle.bypass_mlp") return model.shuffle.bypass_mlp ? "true" : "false";
  if (key == "shuffle.block_hidden") return std::to_string(model.shuffle.block_hidden);
  if (key == "opt.beta1") return fmt_double(optim.beta1);
  if (key == "opt.beta2") return fmt_double(optim.beta2);
  if (key == "opt.eps") return fmt_double(optim.eps);
  if (key == "opt.weight_decay") return fmt_double(optim.weight_decay);
  if (key == "opt.clip_norm") return fmt_double(optim.clip_norm);
  if (key == "opt.prompt_drop") return fmt_double(optim.prompt_drop);
  if (key == "sample.schedule") return schedule_kind_name(schedule.kind);
  if (key == "sample.alpha") return fmt_double(schedule.alpha_max);
  if (key == "sample.temperature") return fmt_double(sample_temperature);
  if (key == "sample.top_k") return std::to_string(sample_top_k);
  if (key == "sample.count") return std::to_string(sample_count);
  throw ConfigError("unknown config key: " + key);
}

std::vector<std::string> RunConfig::keys() {
  return {"seed",
          "steps",
          "halt_step",
          "batch_size",
          "lr",
          "lr_floor",
          "warmup_steps",
          "save_every",
          "dataset",
          "out_dir",
          "dataset_size",
          "noise_p",
          "model.d",
          "model.layers",
          "model.heads",
          "model.mlp_ratio",
          "model.rope_base",
          "model.qk_norm",
          "model.z_loss_weight",
          "model.visual_loss_weight",
          "model.rms_eps",
          "grid.h",
          "grid.w",
          "probe.r",
          "vocab.text_size",
          "vocab.visual_size",
          "shuffle.s",
          "shuffle.n_blocks",
          "shuffle.variant",
          "shuffle.extra_pe",
          "shuffle.bypass_mlp",
          "shuffle.block_hidden",
          "opt.beta1",
          "opt.beta2",
          "opt.eps",
          "opt.weight_decay",
          "opt.clip_norm",
          "opt.prompt_drop",
          "sample.schedule",
          "sample.alpha",
          "sample.temperature",
          "sample.top_k",
          "sample.count"};
}

void RunConfig::parse_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value, got '" +
                        line + "'");
    }
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

std::string RunConfig::echo() const {
  std::string out;
  for (const std::string& k : keys()) {
    out += k;
    out += " = ";
    out += get(k);
    out += "\n";
  }
  return out;
}

void RunConfig::validate() const {
  if (steps < 0) throw ConfigError("steps: must be >= 0");
  if (halt_step < 0) throw ConfigError("halt_step: must be >= 0 (0 disables)");
  if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  if (lr < 0.0) throw ConfigError("lr: must be >= 0");
  if (lr_floor < 0.0 || (lr > 0.0 && lr_floor > lr)) throw ConfigError("lr_floor: must lie in [0, lr]");
  if (warmup_steps < 0) throw ConfigError("warmup_steps: must be >= 0");
  if (save_every < 1) throw ConfigError("save_every: must be >= 1");
  if (dataset_size < 1) throw ConfigError("dataset_size: must be >= 1");
  if (noise_p < 0.0 || noise_p >= 0.5) throw ConfigError("noise_p: must lie in [0, 0.5)");
  if (optim.prompt_drop < 0.0 || optim.prompt_drop >= 1.0) {
    throw ConfigError("opt.prompt_drop: must lie in [0, 1)");
  }
  if (sample_temperature < 0.0) throw ConfigError("sample.temperature: must be >= 0");
  if (sample_count < 1) throw ConfigError("sample.count: must be >= 1");
  if (schedule.alpha_max < 1.0) throw ConfigError("sample.alpha: must be >= 1");
  model.validate();
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig cfg;
  cfg.parse_text(ss.str());
  return cfg;
}

double lr_at(const RunConfig& cfg, int step) {
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step) / cfg.warmup_steps;
  }
  const int total = std::max(cfg.steps - cfg.warmup_steps, 1);
  const double t = static_cast<double>(std::min(step, cfg.steps) - cfg.warmup_steps) / total;
  return cfg.lr_floor + 0.5 * (cfg.lr - cfg.lr_floor) * (1.0 + std::cos(3.141592653589793 * t));
}

// -- checkpoint I/O -------------------------------------------------------------

namespace {

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& buf, double d) {
  uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(buf, v);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n, const char* what) {
    if (pos + n > buf.size()) {
      throw IoError(std::string("checkpoint: truncated while reading ") + what);
    }
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64(const char* what) {
    const uint64_t v = u64(what);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  std::string str(const char* what) {
    const uint32_t n = u32(what);
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

void put_array(std::string& buf, const Array& a) {
  for (double v : a.data) put_f64(buf, v);
}

void read_array_into(Reader& r, Array& a, const char* what) {
  for (int64_t i = 0; i < a.numel(); ++i) a.data[i] = r.f64(what);
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string buf;
  buf.append(kCheckpointMagic, 4);
  put_u32(buf, kCheckpointVersion);
  const std::string echo = ckpt.config.echo();
  put_u32(buf, static_cast<uint32_t>(echo.size()));
  buf += echo;
  put_u64(buf, ckpt.step);
  put_u64(buf, ckpt.rng.seed());
  put_u64(buf, ckpt.rng.counter());
  put_u32(buf, static_cast<uint32_t>(ckpt.params.size()));
  for (const ParamStore::Entry& e : ckpt.params.entries()) {
    put_u32(buf, static_cast<uint32_t>(e.name.size()));
    buf += e.name;
    put_u32(buf, static_cast<uint32_t>(e.value.shape.size()));
    for (int d : e.value.shape) put_u64(buf, static_cast<uint64_t>(d));
    put_array(buf, e.value);
    put_array(buf, e.adam_m);
    put_array(buf, e.adam_v);
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + tmp);
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!os) throw IoError("write failed: " + tmp);
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string buf = ss.str();
  Reader r{buf};

  r.need(4, "magic");
  if (std::memcmp(buf.data(), kCheckpointMagic, 4) != 0) {
    throw IoError("checkpoint: bad magic in " + path);
  }
  r.pos = 4;
  const uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const std::string echo = r.str("config");
  ckpt.config.parse_text(echo);
  ckpt.config.validate();
  ckpt.step = r.u64("step");
  const uint64_t seed = r.u64("rng seed");
  const uint64_t counter = r.u64("rng counter");
  ckpt.rng.set_state(seed, counter);

  ckpt.params = build_params(ckpt.config.model, ckpt.config.seed);
  const uint32_t count = r.u32("param count");
  if (count != static_cast<uint32_t>(ckpt.params.size())) {
    throw IoError("checkpoint: has " + std::to_string(count) + " parameters, config expects " +
                  std::to_string(ckpt.params.size()));
  }
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str("param name");
    if (!ckpt.params.has(name)) throw IoError("checkpoint: unexpected parameter " + name);
    ParamStore::Entry& e = ckpt.params.at(name);
    const uint32_t ndim = r.u32("param rank");
    std::vector<int> shape(ndim);
    for (uint32_t dkk = 0; dkk < ndim; ++dkk) shape[dkk] = static_cast<int>(r.u64("param dim"));
    if (shape != e.value.shape) {
      throw IoError("checkpoint: parameter " + name + " has shape " + Array::shape_str(shape) +
                    ", config expects " + Array::shape_str(e.value.shape));
    }
    read_array_into(r, e.value, name.c_str());
    read_array_into(r, e.adam_m, name.c_str());
    read_array_into(r, e.adam_v, name.c_str());
  }
  if (r.pos != buf.size()) throw IoError("checkpoint: trailing bytes in " + path);
  return ckpt;
}

TransferStats transfer_params(const ParamStore& src, ParamStore& dst) {
  TransferStats stats;
  std::vector<std::string> mismatches;
  for (ParamStore::Entry& e : dst.entries()) {
    if (!src.has(e.name)) {
      stats.fresh.push_back(e.name);
      continue;
    }
    const ParamStore::Entry& s = src.at(e.name);
    if (s.value.shape != e.value.shape) {
      mismatches.push_back(e.name + ": " + Array::shape_str(s.value.shape) + " vs " +
                           Array::shape_str(e.value.shape));
      continue;
    }
    e.value = s.value;
    e.adam_m = s.adam_m;
    e.adam_v = s.adam_v;
    ++stats.transferred;
  }
  if (!mismatches.empty()) {
    std::string msg = "transfer_params: shape mismatches:";
    for (const std::string& m : mismatches) msg += "\n  " + m;
    throw ContractError(msg);
  }
  for (const ParamStore::Entry& e : src.entries()) {
    if (!dst.has(e.name)) stats.dropped.push_back(e.name);
  }
  return stats;
}

// -- dataset generation ----------------------------------------------------------

void generate_dataset(const RunConfig& cfg, const std::string& path) {
  cfg.validate();
  Dataset ds;
  ds.layout = cfg.model.vocab;
  ds.seed = cfg.seed;
  Rng rng = Rng::derive(cfg.seed, "dataset");
  const std::vector<Caption> pool = train_captions();
  ds.records.reserve(cfg.dataset_size);
  for (int i = 0; i < cfg.dataset_size; ++i) {
    DatasetRecord rec;
    rec.caption = pool[rng.uniform_int(static_cast<int>(pool.size()))];
    rec.grid = render(rec.caption, cfg.model.grid_h, cfg.model.grid_w, cfg.noise_p, rng, ds.layout);
    ds.records.push_back(std::move(rec));
  }
  write_dataset_file(path, ds);
}

// -- training ------------------------------------------------------------------

std::vector<LossRow> read_loss_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::vector<LossRow> rows;
  std::string line;
  if (!std::getline(is, line)) return rows;  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    LossRow row;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf,%lf", &row.step, &row.total, &row.ce_text,
                    &row.ce_visual, &row.zterm, &row.grad_norm, &row.mean_abs_lse) != 7) {
      throw IoError("loss csv: unparsable row: " + line);
    }
    rows.push_back(row);
  }
  return rows;
}

double final_window_mean(const std::vector<LossRow>& rows, int window) {
  if (rows.empty()) throw ContractError("final_window_mean: no rows");
  const int n = std::min<int>(window, static_cast<int>(rows.size()));
  double sum = 0.0;
  for (size_t i = rows.size() - n; i < rows.size(); ++i) sum += rows[i].total;
  return sum / n;
}

namespace {

std::string csv_header() { return "step,total,ce_text,ce_visual,zterm,grad_norm,mean_abs_lse\n"; }

std::string csv_row(const LossRow& r) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.total,
                r.ce_text, r.ce_visual, r.zterm, r.grad_norm, r.mean_abs_lse);
  return buf;
}

// Config compatibility for resume: everything except the run-length controls
// must match.
void check_resume_compatible(const RunConfig& saved, const RunConfig& now) {
  for (const std::string& k : RunConfig::keys()) {
    if (k == "steps" || k == "halt_step") continue;
    if (saved.get(k) != now.get(k)) {
      throw ConfigError("resume: config key '" + k + "' changed from '" + saved.get(k) + "' to '" +
                        now.get(k) + "'");
    }
  }
}

TrainOutcome run_training_impl(const RunConfig& cfg, const ParamStore* init_params) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(cfg.out_dir);
  if (cfg.dataset.empty()) throw ConfigError("dataset: path required for training");
  const Dataset ds = read_dataset_file(cfg.dataset);
  if (ds.layout.text_size != cfg.model.vocab.text_size ||
      ds.layout.visual_size != cfg.model.vocab.visual_size) {
    throw ConfigError("dataset: vocabulary (" + std::to_string(ds.layout.text_size) + ", " +
                      std::to_string(ds.layout.visual_size) + ") does not match config vocab");
  }
  if (ds.records.empty()) throw ConfigError("dataset: no records in " + cfg.dataset);
  for (const DatasetRecord& rec : ds.records) {
    if (rec.grid.h != cfg.model.grid_h || rec.grid.w != cfg.model.grid_w) {
      throw ConfigError("dataset: record grid " + std::to_string(rec.grid.h) + "x" +
                        std::to_string(rec.grid.w) + " does not match config grid");
    }
  }

  const std::string ckpt_path = cfg.out_dir + "/checkpoint.tshf";
  const std::string csv_path = cfg.out_dir + "/loss.csv";

  ParamStore store;
  Rng run_rng = Rng::derive(cfg.seed, "train");
  int start_step = 0;
  std::vector<LossRow> rows;
  if (fs::exists(ckpt_path)) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    check_resume_compatible(ck.config, cfg);
    store = std::move(ck.params);
    run_rng = ck.rng;
    start_step = static_cast<int>(ck.step);
    if (fs::exists(csv_path)) {
      for (const LossRow& r : read_loss_csv(csv_path)) {
        if (r.step <= start_step) rows.push_back(r);
      }
    }
    log_line("resuming from step " + std::to_string(start_step));
  } else {
    store = build_params(cfg.model, cfg.seed);
    if (init_params) transfer_params(*init_params, store);
  }

  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw IoError("cannot open for writing: " + csv_path);
  csv << csv_header();
  for (const LossRow& r : rows) csv << csv_row(r);
  csv.flush();

  const int last_step = cfg.halt_step > 0 ? std::min(cfg.halt_step, cfg.steps) : cfg.steps;
  const int N = static_cast<int>(ds.records.size());
  Checkpoint ckpt;
  ckpt.config = cfg;
  for (int step = start_step + 1; step <= last_step; ++step) {
    std::vector<DatasetRecord> batch(cfg.batch_size);
    for (int b = 0; b < cfg.batch_size; ++b) batch[b] = ds.records[run_rng.uniform_int(N)];
    const TrainMetrics m =
        train_step(batch, cfg.model, store, cfg.optim, lr_at(cfg, step), step, run_rng);
    LossRow row{step, m.total, m.ce_text, m.ce_visual, m.z_term, m.grad_norm, m.mean_abs_lse};
    rows.push_back(row);
    csv << csv_row(row);
    csv.flush();
    if (step % cfg.save_every == 0 || step == last_step) {
      ckpt.params = store;
      ckpt.step = static_cast<uint64_t>(step);
      ckpt.rng = run_rng;
      save_checkpoint(ckpt_path, ckpt);
    }
    if (step % 100 == 0 || step == last_step) {
      char msg[160];
      std::snprintf(msg, sizeof(msg), "step %d/%d loss=%.4f ce_vis=%.4f grad=%.3f", step, last_step,
                    m.total, m.ce_visual, m.grad_norm);
      log_line(msg);
    }
  }

  if (start_step >= last_step && !fs::exists(ckpt_path)) {
    // Zero-step run: still produce a checkpoint of the initialization.
    ckpt.params = store;
    ckpt.step = static_cast<uint64_t>(start_step);
    ckpt.rng = run_rng;
    save_checkpoint(ckpt_path, ckpt);
  }

  TrainOutcome out;
  out.checkpoint = load_checkpoint(ckpt_path);
  out.checkpoint_path = ckpt_path;
  out.csv_path = csv_path;
  out.final_loss = rows.empty() ? 0.0 : final_window_mean(rows);
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace

TrainOutcome run_training(const RunConfig& cfg) { return run_training_impl(cfg, nullptr); }

TrainOutcome staged_train(const std::vector<RunConfig>& stages) {
  if (stages.empty()) throw ContractError("staged_train: no stages");
  TrainOutcome out;
  bool have_prev = false;
  Checkpoint prev;
  for (size_t k = 0; k < stages.size(); ++k) {
    const RunConfig& stage = stages[k];
    stage.validate();
    if (k > 0) {
      const RunConfig& last = stages[k - 1];
      if (stage.model.grid_h < last.model.grid_h || stage.model.grid_w < last.model.grid_w) {
        throw ContractError("staged_train: stage " + std::to_string(k) + " grid must not shrink");
      }
      if (stage.model.d != last.model.d || stage.model.vocab.total() != last.model.vocab.total()) {
        throw ContractError("staged_train: stage " + std::to_string(k) +
                            " must keep model dim and vocabulary");
      }
      if (stage.out_dir == last.out_dir) {
        throw ContractError("staged_train: stages must use distinct out_dir values");
      }
    }
    log_line("stage " + std::to_string(k + 1) + "/" + std::to_string(stages.size()) + ": grid " +
             std::to_string(stage.model.grid_h) + "x" + std::to_string(stage.model.grid_w) + " s=" +
             std::to_string(stage.model.shuffle.s));
    out = have_prev ? run_training_impl(stage, &prev.params) : run_training_impl(stage, nullptr);
    prev = out.checkpoint;
    have_prev = true;
  }
  return out;
}

// -- selftest -------------------------------------------------------------------

namespace {

// Central-difference gradient of a scalar function of one leaf array.
bool fd_check(const std::function<double(const Array&)>& f, const Array& x0, const Array& grad,
              double tol) {
  const double h = 1e-6;
  for (int64_t i = 0; i < x0.numel(); ++i) {
    Array xp = x0, xm = x0;
    xp.data[i] += h;
    xm.data[i] -= h;
    const double fd = (f(xp) - f(xm)) / (2.0 * h);
    const double denom = std::max({std::abs(fd), std::abs(grad.data[i]), 1e-2});
    if (std::abs(fd - grad.data[i]) / denom > tol) return false;
  }
  return true;
}

}  // namespace

int selftest(const std::string& scratch_dir) {
  int failures = 0;
  const auto check = [&](const std::string& name, const std::function<bool()>& fn) {
    bool ok = false;
    std::string err;
    try {
      ok = fn();
    } catch (const std::exception& e) {
      err = e.what();
    }
    std::string line = "selftest: " + name + (ok ? " ... ok" : " ... FAIL");
    if (!ok && !err.empty()) line += " (" + err + ")";
    log_line(line);
    if (!ok) ++failures;
  };

  check("window map bijection", [] {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      const int s = 1 + rng.uniform_int(4);
      const int h = s * (1 + rng.uniform_int(6));
      const int w = s * (1 + rng.uniform_int(6));
      std::vector<int> perm = window_index_map(h, w, s);
      std::sort(perm.begin(), perm.end());
      for (int i = 0; i < h * w; ++i) {
        if (perm[i] != i) return false;
      }
    }
    return true;
  });

  check("bypass round trip", [] {
    Rng rng(11);
    for (int s : {1, 2, 4}) {
      ShuffleConfig sc;
      sc.s = s;
      sc.bypass_mlp = true;
      const int h = 8, w = 8, d = 64;
      ParamStore store;
      register_shuffle_params(store, sc, d, h, w, 1);
      Tape tape;
      BoundParams bound = bind_params(tape, store);
      Array x = Array::uniform({h * w, d}, -1.0, 1.0, rng);
      Var xv = tape.leaf(x);
      Var rt = token_unshuffle(tape, token_shuffle(tape, xv, sc, bound, h, w), sc, bound, h, w);
      // Kept channel slices come back bit-exact; everything else is zero.
      const int s2 = s * s, c = d / s2;
      const std::vector<int> perm = window_index_map(h, w, s);
      Array expected({h * w, d});
      for (int k = 0; k < (h * w) / s2; ++k) {
        for (int t = 0; t < s2; ++t) {
          const size_t row = static_cast<size_t>(perm[k * s2 + t]);
          for (int j = 0; j < c; ++j) {
            expected.data[row * d + t * c + j] = x.data[row * d + t * c + j];
          }
        }
      }
      if (tape.value(rt).data != expected.data) return false;
    }
    return true;
  });

  check("primitive gradients", [] {
    Rng rng(13);
    const Array x0 = Array::uniform({3, 4}, -1.0, 1.0, rng);
    const Array w0 = Array::uniform({4, 2}, -1.0, 1.0, rng);
    const Array gain = Array::uniform({4}, 0.5, 1.5, rng);
    Array mix = Array::uniform({3, 2}, -1.0, 1.0, rng);
    const auto f = [&](const Array& x) {
      Tape t;
      Var xv = t.leaf(x, true);
      Var y = t.matmul(t.gelu(t.rms_norm(xv, t.leaf(gain), 1e-6)), t.leaf(w0));
      return t.value(t.dot_const(y, mix)).data[0];
    };
    Tape t;
    Var xv = t.leaf(x0, true);
    Var y = t.matmul(t.gelu(t.rms_norm(xv, t.leaf(gain), 1e-6)), t.leaf(w0));
    Var loss = t.dot_const(y, mix);
    t.backward(loss);
    return fd_check(f, x0, t.grad(xv), 1e-5);
  });

  check("logsumexp agreement", [] {
    Rng rng(17);
    Tape t;
    Array x = Array::uniform({5, 6}, -2.0, 2.0, rng);
    const Array lse = t.value(t.logsumexp_rows(t.leaf(x)));
    for (int i = 0; i < 5; ++i) {
      double naive = 0.0;
      for (int j = 0; j < 6; ++j) naive += std::exp(x.at(i, j));
      if (std::abs(std::log(naive) - lse.data[i]) > 1e-10) return false;
    }
    return true;
  });

  check("cfg identities", [] {
    const std::vector<double> lc{1.0, 3.0, -2.0}, lu{0.5, 0.0, 1.0};
    if (guided_logits(lc, lu, 1.0) != lc) return false;
    if (guided_logits(lc, lu, 0.0) != lu) return false;
    CFGSchedule lin{ScheduleKind::kLinear, 7.5};
    if (scale_at(lin, 0, 64) != 1.0 || scale_at(lin, 63, 64) != 7.5) return false;
    for (int i = 1; i < 64; ++i) {
      if (scale_at(lin, i, 64) < scale_at(lin, i - 1, 64)) return false;
    }
    return true;
  });

  check("render/decode inverse", [] {
    const VocabLayout layout = build_layout(64, 512);
    for (int idx : {0, 17, 34, 59}) {
      Rng rng(100 + idx);
      const Caption c = caption_from_index(idx);
      const TokenGrid g = render(c, 16, 16, 0.0, rng, layout);
      const DecodedCaption dec = decode_attributes(g, layout);
      if (!(dec.caption == c) || dec.confidence != 1.0) return false;
    }
    return true;
  });

  check("checkpoint round trip", [&] {
    RunConfig cfg;
    cfg.model.d = 16;
    cfg.model.layers = 1;
    cfg.model.heads = 2;
    cfg.model.grid_h = cfg.model.grid_w = 4;
    cfg.model.shuffle.s = 2;
    cfg.model.shuffle.n_blocks = 1;
    cfg.out_dir = scratch_dir;
    fs::create_directories(scratch_dir);
    Checkpoint ck;
    ck.config = cfg;
    ck.params = build_params(cfg.model, cfg.seed);
    ck.step = 3;
    ck.rng = Rng(9, 42);
    const std::string p1 = scratch_dir + "/selftest_a.tshf";
    const std::string p2 = scratch_dir + "/selftest_b.tshf";
    save_checkpoint(p1, ck);
    save_checkpoint(p2, load_checkpoint(p1));
    std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    return sa.str() == sb.str() && !sa.str().empty();
  });

  check("visual band sampling", [] {
    const VocabLayout layout = build_layout(64, 512);
    Rng rng(23);
    std::vector<double> logits(layout.total());
    for (double& v : logits) v = rng.uniform(-3.0, 3.0);
    for (int i = 0; i < 2000; ++i) {
      const int id = sample_token(logits, 1.0, 64, layout.visual_begin(), layout.visual_end(), rng);
      if (!layout.is_visual(id)) return false;
    }
    return true;
  });

  check("deterministic replay", [] {
    const VocabLayout layout = build_layout(64, 512);
    Rng r1(5), r2(5);
    const TokenGrid a = render(caption_from_index(7), 16, 16, 0.1, r1, layout);
    const TokenGrid b = render(caption_from_index(7), 16, 16, 0.1, r2, layout);
    return a.ids == b.ids;
  });

  return failures;
}

}  // namespace ts
