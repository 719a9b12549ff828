#include "experiments.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <Eigen/SVD>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "threads.hpp"

namespace ts {

void write_sweep_csv(const std::string& path, const std::vector<SweepPoint>& points) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "key,final_loss,steps,wall_seconds\n";
  char buf[256];
  for (const SweepPoint& p : points) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%d,%.3f\n", p.key.c_str(), p.final_loss, p.steps,
                  p.wall_seconds);
    os << buf;
  }
}

namespace {

SweepPoint run_point(const RunConfig& cfg, const std::string& key) {
  log_line("sweep point " + key + " -> " + cfg.out_dir);
  const TrainOutcome out = run_training(cfg);
  SweepPoint p;
  p.key = key;
  p.final_loss = out.final_loss;
  p.wall_seconds = out.wall_seconds;
  p.steps = cfg.steps;
  p.csv_path = out.csv_path;
  p.out_dir = cfg.out_dir;
  return p;
}

void ensure_dataset(RunConfig& base) {
  if (base.dataset.empty()) {
    base.dataset = base.out_dir + "/dataset.txt";
  }
  if (!std::filesystem::exists(base.dataset)) {
    std::filesystem::create_directories(base.out_dir);
    generate_dataset(base, base.dataset);
    log_line("generated dataset " + base.dataset);
  }
}

}  // namespace

std::vector<SweepPoint> run_window_sweep(const RunConfig& base_in, const std::vector<int>& s_list) {
  RunConfig base = base_in;
  base.validate();
  ensure_dataset(base);
  std::vector<SweepPoint> points;
  for (int s : s_list) {
    RunConfig cfg = base;
    cfg.model.shuffle.s = s;
    cfg.out_dir = base.out_dir + "/s" + std::to_string(s);
    cfg.validate();
    points.push_back(run_point(cfg, "s=" + std::to_string(s)));
  }
  write_sweep_csv(base.out_dir + "/window_sweep.csv", points);
  return points;
}

RunConfig variant_config(const RunConfig& base, const std::string& variant) {
  RunConfig cfg = base;
  if (variant == "shuffle") {
    cfg.model.shuffle.variant = ShuffleVariant::kShuffle;
  } else if (variant == "shuffle_n4") {
    cfg.model.shuffle.variant = ShuffleVariant::kShuffle;
    cfg.model.shuffle.n_blocks = 4;
  } else if (variant == "shuffle_n6") {
    cfg.model.shuffle.variant = ShuffleVariant::kShuffle;
    cfg.model.shuffle.n_blocks = 6;
  } else if (variant == "drop") {
    cfg.model.shuffle.variant = ShuffleVariant::kDrop;
  } else if (variant == "simple") {
    cfg.model.shuffle.variant = ShuffleVariant::kSimple;
  } else if (variant == "shuffle_local_pe") {
    cfg.model.shuffle.variant = ShuffleVariant::kShuffle;
    cfg.model.shuffle.extra_pe = ExtraPe::kLocal;
  } else if (variant == "shuffle_global_pe") {
    cfg.model.shuffle.variant = ShuffleVariant::kShuffle;
    cfg.model.shuffle.extra_pe = ExtraPe::kGlobal;
  } else {
    throw ConfigError("unknown variant key: " + variant);
  }
  cfg.out_dir = base.out_dir + "/" + variant;
  return cfg;
}

std::vector<SweepPoint> run_variant_sweep(const RunConfig& base_in,
                                          const std::vector<std::string>& variants) {
  RunConfig base = base_in;
  base.validate();
  ensure_dataset(base);
  std::vector<SweepPoint> points;
  for (const std::string& v : variants) {
    RunConfig cfg = variant_config(base, v);
    cfg.validate();
    points.push_back(run_point(cfg, v));
  }
  write_sweep_csv(base.out_dir + "/variant_sweep.csv", points);
  return points;
}

std::vector<SweepPoint> run_redundancy_probe(const RunConfig& base_in, const std::vector<int>& r_list) {
  RunConfig base = base_in;
  base.model.shuffle.s = 1;  // probe setting: no token fusion
  base.validate();
  ensure_dataset(base);
  std::vector<SweepPoint> points;
  for (int r : r_list) {
    RunConfig cfg = base;
    cfg.model.redundancy_r = r;
    cfg.out_dir = base.out_dir + "/r" + std::to_string(r);
    cfg.validate();
    points.push_back(run_point(cfg, "r=" + std::to_string(r)));
  }
  write_sweep_csv(base.out_dir + "/redundancy_probe.csv", points);
  return points;
}

std::vector<double> probed_visual_singular_values(const ModelConfig& cfg, const ParamStore& params) {
  if (cfg.redundancy_r < 1) throw ContractError("probed_visual_singular_values: probe disabled");
  const Array& embed = params.at("embed").value;
  const Array& w1 = params.at("probe.reduce").value;
  const Array& w2 = params.at("probe.expand").value;
  const int vis = cfg.vocab.visual_size;
  const int d = cfg.d;
  Array evis({vis, d});
  std::copy(embed.data.begin() + static_cast<size_t>(cfg.vocab.visual_begin()) * d,
            embed.data.begin() + static_cast<size_t>(cfg.vocab.visual_end()) * d, evis.data.begin());
  Array tmp({vis, d / cfg.redundancy_r});
  kernels::gemm(evis.data.data(), w1.data.data(), tmp.data.data(), vis, d, d / cfg.redundancy_r, false,
                false, false);
  Array probed({vis, d});
  kernels::gemm(tmp.data.data(), w2.data.data(), probed.data.data(), vis, d / cfg.redundancy_r, d,
                false, false, false);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      probed.data.data(), vis, d);
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m);
  std::vector<double> sv(svd.singularValues().data(),
                         svd.singularValues().data() + svd.singularValues().size());
  return sv;
}

double caption_accuracy(const ModelConfig& cfg, const ParamStore& params, const CFGSchedule& schedule,
                        const EvalOptions& opts) {
  const std::vector<Caption> pool = holdout_captions();
  std::vector<double> per(opts.n_samples, 0.0);
  DecodeOptions dec;
  dec.temperature = opts.temperature;
  dec.top_k = opts.top_k;
  parallel_for(opts.n_samples, [&](int i) {
    const Caption want = pool[i % pool.size()];
    const GenerateResult gen = generate(want, cfg, params, schedule, cfg.grid_h, cfg.grid_w, dec,
                                        Rng::derive(opts.seed, static_cast<uint64_t>(i)).seed());
    const DecodedCaption got = decode_attributes(gen.grid, cfg.vocab);
    int correct = 0;
    correct += got.caption.color == want.color;
    correct += got.caption.shape == want.shape;
    correct += got.caption.position == want.position;
    per[i] = correct / 3.0;
  });
  double acc = 0.0;
  for (double v : per) acc += v;
  return acc / opts.n_samples;
}

std::vector<CfgSweepRow> run_cfg_sweep(const Checkpoint& ckpt, const std::vector<std::string>& kinds,
                                       const std::vector<double>& alphas, const EvalOptions& opts) {
  std::vector<CfgSweepRow> rows;
  for (const std::string& kind : kinds) {
    for (double alpha : alphas) {
      CFGSchedule sched;
      sched.kind = parse_schedule_kind(kind);
      sched.alpha_max = alpha;
      CfgSweepRow row;
      row.kind = kind;
      row.alpha = alpha;
      row.n_samples = opts.n_samples;
      row.accuracy = caption_accuracy(ckpt.config.model, ckpt.params, sched, opts);
      char msg[128];
      std::snprintf(msg, sizeof(msg), "cfg sweep %s alpha=%.2f accuracy=%.4f", kind.c_str(), alpha,
                    row.accuracy);
      log_line(msg);
      rows.push_back(row);
    }
  }
  return rows;
}

void write_cfg_sweep_csv(const std::string& path, const std::vector<CfgSweepRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "schedule,alpha,accuracy,n_samples\n";
  char buf[160];
  for (const CfgSweepRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%d\n", r.kind.c_str(), r.alpha, r.accuracy,
                  r.n_samples);
    os << buf;
  }
}

FlopsReport flops_estimate(const CostModel& cost) {
  if (cost.d < 1 || cost.layers < 1 || cost.seq_len < 1) {
    throw ContractError("flops_estimate: dimensions must be positive");
  }
  const double d = cost.d;
  const double T = static_cast<double>(cost.seq_len);
  FlopsReport rep;
  rep.transformer_forward =
      cost.layers * (8.0 * d * d * T + 4.0 * cost.mlp_ratio * d * d * T + 4.0 * d * T * T);
  rep.transformer_train = 3.0 * rep.transformer_forward;

  const double s2 = static_cast<double>(cost.s) * cost.s;
  const double c = d / s2;
  const double hw = static_cast<double>(cost.visual_tokens);
  const double nf = hw / s2;
  const double hidden = cost.block_hidden > 0 ? cost.block_hidden : std::max(8, cost.d / 8);
  rep.shuffle_forward = hw * 2.0 * d * c                      // compress
                        + 2.0 * cost.n_blocks * nf * 4.0 * d * hidden  // in + out blocks
                        + hw * 2.0 * c * d;                   // expand
  rep.shuffle_train = 3.0 * rep.shuffle_forward;
  rep.inference_steps = cost.prefix_len + static_cast<int64_t>(nf);
  return rep;
}

CostModel cost_model_from(const ModelConfig& cfg, bool conditional) {
  CostModel cost;
  cost.d = cfg.d;
  cost.layers = cfg.layers;
  cost.heads = cfg.heads;
  cost.mlp_ratio = cfg.mlp_ratio;
  cost.prefix_len = conditional ? 2 + kCaptionTokens : 2;
  cost.visual_tokens = static_cast<int64_t>(cfg.grid_h) * cfg.grid_w;
  cost.s = cfg.shuffle.s;
  cost.n_blocks = cfg.shuffle.n_blocks;
  cost.block_hidden = cfg.shuffle.block_hidden;
  cost.seq_len = cost.prefix_len + cost.visual_tokens / (cfg.shuffle.s * cfg.shuffle.s) + 2;
  return cost;
}

double measured_transformer_forward_flops(const ModelConfig& cfg, int seq_len) {
  ParamStore store = build_params(cfg, 1);
  Tape tape(false);
  BoundParams bound = bind_params(tape, store, false);
  Rng rng(3);
  const Array x = Array::uniform({seq_len, cfg.d}, -1.0, 1.0, rng);
  kernels::flop_counter_reset();
  kernels::flop_counter_enable(true);
  transformer_forward(tape, tape.constant(x), cfg, bound);
  kernels::flop_counter_enable(false);
  return static_cast<double>(kernels::flop_counter_read());
}

void write_flops_csv(const std::string& path,
                     const std::vector<std::pair<std::string, FlopsReport>>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "key,transformer_forward,transformer_train,shuffle_forward,shuffle_train,inference_steps\n";
  char buf[256];
  for (const auto& [key, rep] : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g,%.17g,%lld\n", key.c_str(),
                  rep.transformer_forward, rep.transformer_train, rep.shuffle_forward,
                  rep.shuffle_train, static_cast<long long>(rep.inference_steps));
    os << buf;
  }
}

}  // namespace ts
