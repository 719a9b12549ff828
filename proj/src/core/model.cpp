#include "model.hpp"

#include <cmath>
#include <sstream>

#include "threads.hpp"

namespace ts {

void ModelConfig::validate() const {
  const auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (d < 2) fail("model.d: must be >= 2, got " + std::to_string(d));
  if (layers < 1) fail("model.layers: must be >= 1");
  if (heads < 1) fail("model.heads: must be >= 1");
  if (d % heads != 0) {
    fail("model.heads: heads=" + std::to_string(heads) + " must divide d=" + std::to_string(d));
  }
  if ((d / heads) % 2 != 0) fail("model.heads: head_dim must be even for rotary embedding");
  if (mlp_ratio < 1) fail("model.mlp_ratio: must be >= 1");
  if (shuffle.s < 1) fail("shuffle.s: must be >= 1");
  if (d % (shuffle.s * shuffle.s) != 0) {
    fail("shuffle.s: s^2=" + std::to_string(shuffle.s * shuffle.s) + " must divide d=" +
         std::to_string(d));
  }
  if (grid_h < 1 || grid_w < 1) fail("grid: dims must be positive");
  if (grid_h % shuffle.s != 0 || grid_w % shuffle.s != 0) {
    fail("shuffle.s: s=" + std::to_string(shuffle.s) + " must divide grid " + std::to_string(grid_h) +
         "x" + std::to_string(grid_w));
  }
  if (shuffle.n_blocks < 0) fail("shuffle.n_blocks: must be >= 0");
  if (z_loss_weight < 0.0) fail("model.z_loss_weight: must be >= 0");
  if (!(visual_loss_weight > 0.0) || visual_loss_weight > 1.0) {
    fail("model.visual_loss_weight: must lie in (0, 1]");
  }
  if (redundancy_r < 0) fail("probe.r: must be >= 0");
  if (redundancy_r > 0 && d % redundancy_r != 0) {
    fail("probe.r: r=" + std::to_string(redundancy_r) + " must divide d=" + std::to_string(d));
  }
  if (rope_base <= 1.0) fail("model.rope_base: must be > 1");
  if (vocab.text_size < 1 || vocab.visual_size < 1) fail("vocab: band sizes must be >= 1");
}

ParamStore build_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamStore store;
  const int V = cfg.vocab.total();
  store.add("embed", {V, cfg.d}, cfg.d, seed);
  if (cfg.redundancy_r > 0) {
    // Bias-free by construction so the probed embedding matrix has rank <= d/r.
    store.add("probe.reduce", {cfg.d, cfg.d / cfg.redundancy_r}, cfg.d, seed);
    store.add("probe.expand", {cfg.d / cfg.redundancy_r, cfg.d}, cfg.d / cfg.redundancy_r, seed);
  }
  register_shuffle_params(store, cfg.shuffle, cfg.d, cfg.grid_h, cfg.grid_w, seed);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    store.add_constant(p + "attn_norm.gain", {cfg.d}, 1.0);
    store.add(p + "attn.wq", {cfg.d, cfg.d}, cfg.d, seed);
    store.add(p + "attn.wk", {cfg.d, cfg.d}, cfg.d, seed);
    store.add(p + "attn.wv", {cfg.d, cfg.d}, cfg.d, seed);
    store.add(p + "attn.wo", {cfg.d, cfg.d}, cfg.d, seed);
    if (cfg.qk_norm) {
      store.add_constant(p + "attn.q_gain", {cfg.head_dim()}, 1.0);
      store.add_constant(p + "attn.k_gain", {cfg.head_dim()}, 1.0);
    }
    store.add_constant(p + "mlp_norm.gain", {cfg.d}, 1.0);
    store.add(p + "mlp.w1", {cfg.d, cfg.mlp_ratio * cfg.d}, cfg.d, seed);
    store.add_constant(p + "mlp.b1", {cfg.mlp_ratio * cfg.d}, 0.0);
    store.add(p + "mlp.w2", {cfg.mlp_ratio * cfg.d, cfg.d}, cfg.mlp_ratio * cfg.d, seed);
    store.add_constant(p + "mlp.b2", {cfg.d}, 0.0);
  }
  store.add_constant("final_norm.gain", {cfg.d}, 1.0);
  store.add("output.w", {cfg.d, V}, cfg.d, seed);
  return store;
}

MixedSequence make_sequence(const Caption& caption, const TokenGrid& grid, const VocabLayout& layout) {
  MixedSequence seq;
  seq.prefix.push_back(VocabLayout::kBos);
  const std::vector<int> cap = tokenize_caption(caption, layout);
  seq.prefix.insert(seq.prefix.end(), cap.begin(), cap.end());
  seq.prefix.push_back(VocabLayout::kSoi);
  seq.grid = grid;
  seq.suffix = {VocabLayout::kEoi, VocabLayout::kEos};
  return seq;
}

MixedSequence make_sequence_unconditional(const TokenGrid& grid, const VocabLayout& layout) {
  (void)layout;
  MixedSequence seq;
  seq.prefix = {VocabLayout::kBos, VocabLayout::kSoi};
  seq.grid = grid;
  seq.suffix = {VocabLayout::kEoi, VocabLayout::kEos};
  return seq;
}

namespace {

// Visual-span embedding path shared by training and generation: probe (when
// enabled) then the configured fuse operator.
Var embed_visual_span(Tape& tape, Var visual_emb, const ModelConfig& cfg, const BoundParams& params,
                      int h, int w) {
  Var x = visual_emb;
  if (cfg.redundancy_r > 0) {
    x = tape.matmul(tape.matmul(x, params["probe.reduce"]), params["probe.expand"]);
  }
  return fuse_visual(tape, x, cfg.shuffle, params, h, w);
}

}  // namespace

Var embed_and_fuse(Tape& tape, const MixedSequence& seq, const ModelConfig& cfg,
                   const BoundParams& params) {
  const int p = seq.prefix_len();
  const int hw = seq.grid.cells();
  const int suf = seq.suffix_len();
  std::vector<int> ids;
  ids.reserve(p + hw + suf);
  ids.insert(ids.end(), seq.prefix.begin(), seq.prefix.end());
  ids.insert(ids.end(), seq.grid.ids.begin(), seq.grid.ids.end());
  ids.insert(ids.end(), seq.suffix.begin(), seq.suffix.end());
  Var emb = tape.gather_rows(params["embed"], std::move(ids));

  Var visual = tape.slice_rows(emb, p, hw);
  Var fused = embed_visual_span(tape, visual, cfg, params, seq.grid.h, seq.grid.w);

  std::vector<Var> spans;
  if (p > 0) spans.push_back(tape.slice_rows(emb, 0, p));
  spans.push_back(fused);
  if (suf > 0) spans.push_back(tape.slice_rows(emb, p + hw, suf));
  return tape.concat_rows(spans);
}

Var transformer_forward(Tape& tape, Var x, const ModelConfig& cfg, const BoundParams& params,
                        KvCache* cache) {
  const Array& xv = tape.value(x);
  if (xv.shape.size() != 2 || xv.shape[1] != cfg.d) {
    throw DimensionError("transformer_forward: expected [T, " + std::to_string(cfg.d) + "], got " +
                         Array::shape_str(xv.shape));
  }
  const int t_new = xv.shape[0];
  const int past = cache ? cache->len : 0;
  if (cache && static_cast<int>(cache->k.size()) != cfg.layers) {
    throw ContractError("transformer_forward: cache has " + std::to_string(cache->k.size()) +
                        " layers, model has " + std::to_string(cfg.layers));
  }
  const int t_total = past + t_new;
  const int hd = cfg.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<int> pos(t_new);
  for (int i = 0; i < t_new; ++i) pos[i] = past + i;

  // Causal mask over fused positions, shared by every layer and head. -1e30
  // underflows to an exact zero after softmax, which keeps masked positions
  // bitwise inert.
  Array mask({t_new, t_total});
  for (int i = 0; i < t_new; ++i) {
    for (int j = 0; j < t_total; ++j) {
      mask.at(i, j) = j <= past + i ? 0.0 : -1e30;
    }
  }
  const Var mask_var = tape.constant(std::move(mask));

  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Var xn = tape.rms_norm(x, params[p + "attn_norm.gain"], cfg.rms_eps);
    Var q = tape.matmul(xn, params[p + "attn.wq"]);
    Var k = tape.matmul(xn, params[p + "attn.wk"]);
    Var v = tape.matmul(xn, params[p + "attn.wv"]);

    std::vector<Var> q_heads(cfg.heads), k_heads(cfg.heads);
    for (int h = 0; h < cfg.heads; ++h) {
      Var qh = tape.slice_cols(q, h * hd, hd);
      Var kh = tape.slice_cols(k, h * hd, hd);
      if (cfg.qk_norm) {
        qh = tape.rms_norm(qh, params[p + "attn.q_gain"], cfg.rms_eps);
        kh = tape.rms_norm(kh, params[p + "attn.k_gain"], cfg.rms_eps);
      }
      q_heads[h] = tape.rope(qh, pos, cfg.rope_base);
      k_heads[h] = tape.rope(kh, pos, cfg.rope_base);
    }
    Var k_rot = cfg.heads > 1 ? tape.concat_cols(k_heads) : k_heads[0];

    Var k_all = k_rot, v_all = v;
    if (cache) {
      if (past > 0) {
        if (cache->k[l].shape.empty() || cache->k[l].shape[0] != past) {
          throw ContractError("transformer_forward: cache length mismatch at layer " +
                              std::to_string(l) + " (expected " + std::to_string(past) + " positions)");
        }
        k_all = tape.concat_rows({tape.constant(cache->k[l]), k_rot});
        v_all = tape.concat_rows({tape.constant(cache->v[l]), v});
      }
      // Append the new positions' keys/values for the next call.
      const Array& knew = tape.value(k_rot);
      const Array& vnew = tape.value(v);
      if (past == 0) {
        cache->k[l] = knew;
        cache->v[l] = vnew;
      } else {
        cache->k[l].data.insert(cache->k[l].data.end(), knew.data.begin(), knew.data.end());
        cache->k[l].shape[0] += t_new;
        cache->v[l].data.insert(cache->v[l].data.end(), vnew.data.begin(), vnew.data.end());
        cache->v[l].shape[0] += t_new;
      }
    }

    std::vector<Var> ctx_heads(cfg.heads);
    for (int h = 0; h < cfg.heads; ++h) {
      Var kh = tape.slice_cols(k_all, h * hd, hd);
      Var vh = tape.slice_cols(v_all, h * hd, hd);
      Var scores = tape.scale(tape.matmul_nt(q_heads[h], kh), inv_sqrt_hd);
      scores = tape.add(scores, mask_var);
      Var attn = tape.softmax_rows(scores);
      ctx_heads[h] = tape.matmul(attn, vh);
    }
    Var ctx = cfg.heads > 1 ? tape.concat_cols(ctx_heads) : ctx_heads[0];
    x = tape.add(x, tape.matmul(ctx, params[p + "attn.wo"]));

    Var mn = tape.rms_norm(x, params[p + "mlp_norm.gain"], cfg.rms_eps);
    Var hphi = tape.gelu(tape.add_bias(tape.matmul(mn, params[p + "mlp.w1"]), params[p + "mlp.b1"]));
    Var mlp = tape.add_bias(tape.matmul(hphi, params[p + "mlp.w2"]), params[p + "mlp.b2"]);
    x = tape.add(x, mlp);
  }
  if (cache) cache->len = t_total;
  return x;
}

TargetLayout target_layout(const MixedSequence& seq) {
  TargetLayout layout;
  const int p = seq.prefix_len();
  layout.targets.reserve(p - 1 + seq.grid.cells() + seq.suffix_len());
  for (int i = 1; i < p; ++i) {
    layout.targets.push_back(seq.prefix[i]);
    layout.visual_row.push_back(0);
  }
  for (int id : seq.grid.ids) {
    layout.targets.push_back(id);
    layout.visual_row.push_back(1);
  }
  for (int id : seq.suffix) {
    layout.targets.push_back(id);
    layout.visual_row.push_back(0);
  }
  return layout;
}

Var unfuse_and_project(Tape& tape, Var hidden, const MixedSequence& seq, const ModelConfig& cfg,
                       const BoundParams& params) {
  const int p = seq.prefix_len();
  const int nf = seq.fused_visual_len(cfg.shuffle.s);
  const int suf = seq.suffix_len();
  const Array& hv = tape.value(hidden);
  if (hv.shape[0] != p + nf + suf) {
    throw DimensionError("unfuse_and_project: hidden rows " + std::to_string(hv.shape[0]) +
                         " do not match fused length " + std::to_string(p + nf + suf));
  }
  Var hn = tape.rms_norm(hidden, params["final_norm.gain"], cfg.rms_eps);

  // Window k's s^2 tokens are all predicted from fused position k-1, so the
  // unshuffle consumes rows p-1 .. p+nf-2 (soi through next-to-last window).
  Var visual_in = tape.slice_rows(hn, p - 1, nf);
  Var per_token = unfuse_visual(tape, visual_in, cfg.shuffle, params, seq.grid.h, seq.grid.w);

  std::vector<Var> rows;
  if (p > 1) rows.push_back(tape.slice_rows(hn, 0, p - 1));
  rows.push_back(per_token);
  if (suf > 0) rows.push_back(tape.slice_rows(hn, p + nf - 1, suf));
  Var feats = rows.size() > 1 ? tape.concat_rows(rows) : rows[0];
  return tape.matmul(feats, params["output.w"]);
}

LossVars sequence_loss(Tape& tape, Var logits, const TargetLayout& layout, const ModelConfig& cfg) {
  const Array& lv = tape.value(logits);
  const int rows = lv.shape[0];
  const int V = lv.shape[1];
  if (rows != layout.rows()) {
    throw ContractError("sequence_loss: " + std::to_string(rows) + " logit rows vs " +
                        std::to_string(layout.rows()) + " targets");
  }
  for (int t : layout.targets) {
    if (t < 0 || t >= V) {
      throw ContractError("sequence_loss: target id " + std::to_string(t) + " outside vocabulary of " +
                          std::to_string(V));
    }
  }
  int n_text = 0, n_vis = 0;
  for (uint8_t f : layout.visual_row) (f ? n_vis : n_text) += 1;

  LossVars out;
  out.lse = tape.logsumexp_rows(logits);
  Var picked = tape.gather_elements(logits, layout.targets);
  Var ce_rows = tape.add_scaled(out.lse, picked, -1.0);

  Array wt({rows}), wv({rows});
  for (int i = 0; i < rows; ++i) {
    if (layout.visual_row[i]) {
      wv.data[i] = 1.0 / n_vis;
    } else {
      wt.data[i] = 1.0 / n_text;
    }
  }
  out.ce_text = n_text > 0 ? tape.dot_const(ce_rows, std::move(wt)) : tape.constant(Array::scalar(0.0));
  out.ce_visual = n_vis > 0 ? tape.dot_const(ce_rows, std::move(wv)) : tape.constant(Array::scalar(0.0));
  out.z_term = tape.scale(tape.reduce_mean(tape.square(out.lse)), cfg.z_loss_weight);
  out.total = tape.add(tape.add_scaled(out.ce_text, out.ce_visual, cfg.visual_loss_weight), out.z_term);
  return out;
}

ForwardLoss forward_loss(Tape& tape, const MixedSequence& seq, const ModelConfig& cfg,
                         const BoundParams& params) {
  ForwardLoss out;
  Var x = embed_and_fuse(tape, seq, cfg, params);
  Var h = transformer_forward(tape, x, cfg, params);
  out.logits = unfuse_and_project(tape, h, seq, cfg, params);
  out.layout = target_layout(seq);
  out.loss = sequence_loss(tape, out.logits, out.layout, cfg);
  return out;
}

namespace {

double mean_abs(const Array& a) {
  double s = 0.0;
  for (double v : a.data) s += std::abs(v);
  return s / static_cast<double>(a.numel());
}

struct ElementResult {
  std::vector<Array> grads;
  TrainMetrics metrics;
  bool finite = true;
  std::string grad_dump;
};

ElementResult run_element(const MixedSequence& seq, const ModelConfig& cfg, const ParamStore& store) {
  ElementResult res;
  Tape tape;
  BoundParams bound = bind_params(tape, store, true);
  ForwardLoss fl = forward_loss(tape, seq, cfg, bound);
  res.metrics.total = tape.value(fl.loss.total).data[0];
  res.metrics.ce_text = tape.value(fl.loss.ce_text).data[0];
  res.metrics.ce_visual = tape.value(fl.loss.ce_visual).data[0];
  res.metrics.z_term = tape.value(fl.loss.z_term).data[0];
  res.metrics.mean_abs_lse = mean_abs(tape.value(fl.loss.lse));
  tape.backward(fl.loss.total);
  res.grads.reserve(store.size());
  for (const ParamStore::Entry& e : store.entries()) {
    res.grads.push_back(tape.grad(bound[e.name]));
  }
  if (!std::isfinite(res.metrics.total)) {
    res.finite = false;
    std::ostringstream os;
    for (int i = 0; i < store.size(); ++i) {
      double n2 = 0.0;
      for (double g : res.grads[i].data) n2 += g * g;
      os << "  " << store.entries()[i].name << " grad_norm=" << std::sqrt(n2) << "\n";
    }
    res.grad_dump = os.str();
  }
  return res;
}

// Global-norm clip + AdamW sweep in registry order. Returns pre-clip norm.
double apply_adamw(ParamStore& store, std::vector<Array>& grads, const OptimConfig& opt, double lr,
                   int step_index) {
  double norm2 = 0.0;
  for (const Array& g : grads) {
    for (double v : g.data) norm2 += v * v;
  }
  const double norm = std::sqrt(norm2);
  const double clip = opt.clip_norm > 0.0 && norm > opt.clip_norm ? opt.clip_norm / norm : 1.0;
  const double bc1 = 1.0 - std::pow(opt.beta1, step_index);
  const double bc2 = 1.0 - std::pow(opt.beta2, step_index);
  for (int i = 0; i < store.size(); ++i) {
    ParamStore::Entry& e = store.entries()[i];
    const bool decay = e.value.shape.size() >= 2;
    Array& g = grads[i];
    for (int64_t j = 0; j < g.numel(); ++j) {
      const double gj = g.data[j] * clip;
      e.adam_m.data[j] = opt.beta1 * e.adam_m.data[j] + (1.0 - opt.beta1) * gj;
      e.adam_v.data[j] = opt.beta2 * e.adam_v.data[j] + (1.0 - opt.beta2) * gj * gj;
      const double mhat = e.adam_m.data[j] / bc1;
      const double vhat = e.adam_v.data[j] / bc2;
      double upd = mhat / (std::sqrt(vhat) + opt.eps);
      if (decay) upd += opt.weight_decay * e.value.data[j];
      e.value.data[j] -= lr * upd;
    }
  }
  return norm;
}

}  // namespace

std::vector<uint8_t> draw_prompt_drops(Rng& rng, int batch_size, double p) {
  std::vector<uint8_t> drops(batch_size);
  for (uint8_t& d : drops) d = rng.bernoulli(p) ? 1 : 0;
  return drops;
}

TrainMetrics train_step(const std::vector<DatasetRecord>& batch, const ModelConfig& cfg,
                        ParamStore& store, const OptimConfig& opt, double lr, int step_index, Rng& rng) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  const int B = static_cast<int>(batch.size());

  // Prompt-drop decisions are drawn up front in batch order so the rng stream
  // is independent of any execution interleaving.
  const std::vector<uint8_t> drops = draw_prompt_drops(rng, B, opt.prompt_drop);
  std::vector<MixedSequence> seqs(B);
  for (int i = 0; i < B; ++i) {
    if (drops[i]) {
      seqs[i] = make_sequence_unconditional(batch[i].grid, cfg.vocab);
    } else {
      seqs[i] = make_sequence(batch[i].caption, batch[i].grid, cfg.vocab);
    }
  }

  std::vector<ElementResult> results(B);
  parallel_for(B, [&](int i) { results[i] = run_element(seqs[i], cfg, store); });

  TrainMetrics metrics;
  std::vector<Array> grads;
  grads.reserve(store.size());
  for (const ParamStore::Entry& e : store.entries()) grads.push_back(Array::zeros(e.value.shape));
  const double inv_b = 1.0 / B;
  for (int i = 0; i < B; ++i) {
    if (!results[i].finite) {
      throw ContractError("train_step: non-finite loss at step " + std::to_string(step_index) +
                          ", batch element " + std::to_string(i) + "\nper-parameter gradient norms:\n" +
                          results[i].grad_dump);
    }
    metrics.total += results[i].metrics.total * inv_b;
    metrics.ce_text += results[i].metrics.ce_text * inv_b;
    metrics.ce_visual += results[i].metrics.ce_visual * inv_b;
    metrics.z_term += results[i].metrics.z_term * inv_b;
    metrics.mean_abs_lse += results[i].metrics.mean_abs_lse * inv_b;
    for (int j = 0; j < store.size(); ++j) {
      Array& acc = grads[j];
      const Array& g = results[i].grads[j];
      for (int64_t n = 0; n < acc.numel(); ++n) acc.data[n] += g.data[n] * inv_b;
    }
  }
  metrics.grad_norm = apply_adamw(store, grads, opt, lr, step_index);
  return metrics;
}

TrainMetrics eval_batch(const std::vector<DatasetRecord>& batch, const ModelConfig& cfg,
                        const ParamStore& store, double uncond_fraction) {
  if (batch.empty()) throw ContractError("eval_batch: empty batch");
  const int B = static_cast<int>(batch.size());
  const int n_uncond = static_cast<int>(uncond_fraction * B);
  TrainMetrics metrics;
  std::vector<TrainMetrics> per(B);
  parallel_for(B, [&](int i) {
    Tape tape(false);
    BoundParams bound = bind_params(tape, store, false);
    const MixedSequence seq = i < n_uncond ? make_sequence_unconditional(batch[i].grid, cfg.vocab)
                                           : make_sequence(batch[i].caption, batch[i].grid, cfg.vocab);
    ForwardLoss fl = forward_loss(tape, seq, cfg, bound);
    per[i].total = tape.value(fl.loss.total).data[0];
    per[i].ce_text = tape.value(fl.loss.ce_text).data[0];
    per[i].ce_visual = tape.value(fl.loss.ce_visual).data[0];
    per[i].z_term = tape.value(fl.loss.z_term).data[0];
    per[i].mean_abs_lse = mean_abs(tape.value(fl.loss.lse));
  });
  const double inv_b = 1.0 / B;
  for (const TrainMetrics& m : per) {
    metrics.total += m.total * inv_b;
    metrics.ce_text += m.ce_text * inv_b;
    metrics.ce_visual += m.ce_visual * inv_b;
    metrics.z_term += m.z_term * inv_b;
    metrics.mean_abs_lse += m.mean_abs_lse * inv_b;
  }
  return metrics;
}

}  // namespace ts
