#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "core/harness.hpp"
#include "testutil.hpp"

using namespace ts;
using namespace ts::testutil;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Small-but-real training config over a 4x4 grid.
RunConfig tiny_run(const std::string& dir, uint64_t seed = 5) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.steps = 8;
  cfg.batch_size = 2;
  cfg.lr = 1e-3;
  cfg.lr_floor = 1e-4;
  cfg.warmup_steps = 2;
  cfg.save_every = 4;
  cfg.dataset_size = 16;
  cfg.noise_p = 0.0;
  cfg.out_dir = dir;
  cfg.dataset = dir + "/data.txt";
  cfg.model = toy_config(16, 1, 2, 2, 4);
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_SUITE_BEGIN("harness");

TEST_CASE("config set/get round trip and echo fixpoint") {
  RunConfig cfg;
  for (const std::string& key : RunConfig::keys()) {
    CHECK_NOTHROW(cfg.get(key));
  }
  cfg.set("model.d", "64");
  cfg.set("shuffle.variant", "drop");
  cfg.set("model.qk_norm", "true");
  cfg.set("sample.alpha", "3.5");
  CHECK(cfg.get("model.d") == "64");
  CHECK(cfg.get("shuffle.variant") == "drop");
  CHECK(cfg.get("model.qk_norm") == "true");

  RunConfig back;
  back.parse_text(cfg.echo());
  CHECK(back.echo() == cfg.echo());
}

TEST_CASE("config rejects unknown keys and bad values by name") {
  RunConfig cfg;
  CHECK_THROWS_WITH_AS(cfg.set("model.dd", "1"), doctest::Contains("model.dd"), ConfigError);
  CHECK_THROWS_WITH_AS(cfg.set("steps", "abc"), doctest::Contains("steps"), ConfigError);
  CHECK_THROWS_WITH_AS(cfg.parse_text("model.d 128\n"), doctest::Contains("key = value"), ConfigError);

  RunConfig bad;
  bad.model.heads = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config file parsing with comments and overrides") {
  RunConfig cfg;
  cfg.parse_text("# a comment\n  steps = 12  # trailing\n\nmodel.d=64\nshuffle.s = 2\n");
  CHECK(cfg.steps == 12);
  CHECK(cfg.model.d == 64);
}

TEST_CASE("lr schedule: warmup then cosine to the floor") {
  RunConfig cfg;
  cfg.lr = 1e-2;
  cfg.lr_floor = 1e-4;
  cfg.warmup_steps = 10;
  cfg.steps = 100;
  CHECK(lr_at(cfg, 1) == doctest::Approx(1e-3));
  CHECK(lr_at(cfg, 10) == doctest::Approx(1e-2));
  CHECK(lr_at(cfg, 100) == doctest::Approx(1e-4));
  CHECK(lr_at(cfg, 55) < 1e-2);
  CHECK(lr_at(cfg, 55) > 1e-4);
}

TEST_CASE("checkpoint: save -> load -> save is byte identical") {
  TempDir dir("ts_ckpt_rt");
  Checkpoint ck;
  ck.config = tiny_run(dir.str());
  ck.params = build_params(ck.config.model, 7);
  ck.step = 11;
  ck.rng = Rng(7, 123);
  const std::string p1 = dir.str() + "/a.tshf";
  const std::string p2 = dir.str() + "/b.tshf";
  save_checkpoint(p1, ck);
  Checkpoint loaded = load_checkpoint(p1);
  CHECK(loaded.step == 11);
  CHECK(loaded.rng.counter() == 123);
  for (int i = 0; i < ck.params.size(); ++i) {
    CHECK(loaded.params.entries()[i].value.data == ck.params.entries()[i].value.data);
    CHECK(loaded.params.entries()[i].adam_m.data == ck.params.entries()[i].adam_m.data);
  }
  save_checkpoint(p2, loaded);
  CHECK(slurp(p1) == slurp(p2));
}

TEST_CASE("checkpoint corruption: truncation, bad magic, shape mismatch") {
  TempDir dir("ts_ckpt_bad");
  Checkpoint ck;
  ck.config = tiny_run(dir.str());
  ck.params = build_params(ck.config.model, 7);
  const std::string p = dir.str() + "/ok.tshf";
  save_checkpoint(p, ck);
  const std::string bytes = slurp(p);

  for (size_t cut : {size_t(2), size_t(10), bytes.size() / 2, bytes.size() - 3}) {
    std::ofstream os(dir.str() + "/cut.tshf", std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(cut));
    os.close();
    CHECK_THROWS_AS(load_checkpoint(dir.str() + "/cut.tshf"), IoError);
  }

  std::string corrupt = bytes;
  corrupt[0] = 'X';
  {
    std::ofstream os(dir.str() + "/magic.tshf", std::ios::binary);
    os.write(corrupt.data(), static_cast<std::streamsize>(corrupt.size()));
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(dir.str() + "/magic.tshf"), doctest::Contains("magic"), IoError);

  // flip the config's model.d: stored parameter shapes no longer match
  std::string reshaped = bytes;
  const size_t pos = reshaped.find("model.d = 16");
  REQUIRE(pos != std::string::npos);
  reshaped.replace(pos, 12, "model.d = 32");
  {
    std::ofstream os(dir.str() + "/shape.tshf", std::ios::binary);
    os.write(reshaped.data(), static_cast<std::streamsize>(reshaped.size()));
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(dir.str() + "/shape.tshf"), doctest::Contains("shape"), IoError);
}

TEST_CASE("gen-data is deterministic and validated") {
  TempDir dir("ts_gendata");
  RunConfig cfg = tiny_run(dir.str());
  generate_dataset(cfg, cfg.dataset);
  const std::string once = slurp(cfg.dataset);
  generate_dataset(cfg, cfg.dataset);
  CHECK(once == slurp(cfg.dataset));

  const Dataset ds = read_dataset_file(cfg.dataset);
  CHECK(static_cast<int>(ds.records.size()) == cfg.dataset_size);
  for (const auto& rec : ds.records) {
    CHECK_FALSE(caption_is_holdout(caption_index(rec.caption)));
  }
}

TEST_CASE("training runs, logs csv, checkpoints, and reproduces bitwise") {
  TempDir dir("ts_train_repro");
  RunConfig cfg = tiny_run(dir.str() + "/a");
  fs::create_directories(cfg.out_dir);
  generate_dataset(cfg, cfg.dataset);
  const TrainOutcome a = run_training(cfg);
  CHECK(fs::exists(a.checkpoint_path));
  CHECK(read_loss_csv(a.csv_path).size() == 8);

  RunConfig cfg2 = tiny_run(dir.str() + "/b");
  fs::create_directories(cfg2.out_dir);
  generate_dataset(cfg2, cfg2.dataset);
  const TrainOutcome b = run_training(cfg2);
  CHECK(slurp(a.csv_path) == slurp(b.csv_path));
  // out_dir/dataset keys differ, so compare parameter payloads not file bytes
  for (int i = 0; i < a.checkpoint.params.size(); ++i) {
    CHECK(a.checkpoint.params.entries()[i].value.data == b.checkpoint.params.entries()[i].value.data);
  }
}

TEST_CASE("lr=0 training leaves the initialization untouched") {
  TempDir dir("ts_train_lr0");
  RunConfig cfg = tiny_run(dir.str());
  cfg.lr = 0.0;
  cfg.lr_floor = 0.0;
  cfg.warmup_steps = 0;
  fs::create_directories(cfg.out_dir);
  generate_dataset(cfg, cfg.dataset);
  const ParamStore init = build_params(cfg.model, cfg.seed);
  const TrainOutcome out = run_training(cfg);
  for (int i = 0; i < init.size(); ++i) {
    CHECK(out.checkpoint.params.entries()[i].value.data == init.entries()[i].value.data);
  }
}

TEST_CASE("split-resume equals uninterrupted training at every logged step") {
  TempDir dir("ts_resume");
  RunConfig full = tiny_run(dir.str() + "/full");
  full.steps = 8;
  full.save_every = 2;
  fs::create_directories(full.out_dir);
  generate_dataset(full, full.dataset);
  const TrainOutcome whole = run_training(full);

  RunConfig split = tiny_run(dir.str() + "/split");
  split.steps = 8;
  split.save_every = 2;
  split.halt_step = 5;
  fs::create_directories(split.out_dir);
  generate_dataset(split, split.dataset);
  run_training(split);
  CHECK(read_loss_csv(split.out_dir + "/loss.csv").size() == 5);
  split.halt_step = 0;
  const TrainOutcome resumed = run_training(split);

  const auto rows_a = read_loss_csv(whole.csv_path);
  const auto rows_b = read_loss_csv(resumed.csv_path);
  REQUIRE(rows_a.size() == rows_b.size());
  for (size_t i = 0; i < rows_a.size(); ++i) {
    CHECK(rows_a[i].total == rows_b[i].total);
    CHECK(rows_a[i].grad_norm == rows_b[i].grad_norm);
  }
  for (int i = 0; i < whole.checkpoint.params.size(); ++i) {
    CHECK(whole.checkpoint.params.entries()[i].value.data ==
          resumed.checkpoint.params.entries()[i].value.data);
  }
}

TEST_CASE("resume refuses configs that changed") {
  TempDir dir("ts_resume_bad");
  RunConfig cfg = tiny_run(dir.str());
  fs::create_directories(cfg.out_dir);
  generate_dataset(cfg, cfg.dataset);
  run_training(cfg);
  cfg.lr = 5e-3;
  CHECK_THROWS_WITH_AS(run_training(cfg), doctest::Contains("lr"), ConfigError);
}

TEST_CASE("dataset/config mismatches are caught before compute") {
  TempDir dir("ts_mismatch");
  RunConfig cfg = tiny_run(dir.str());
  fs::create_directories(cfg.out_dir);
  generate_dataset(cfg, cfg.dataset);
  RunConfig other = cfg;
  other.model.grid_h = other.model.grid_w = 8;
  CHECK_THROWS_WITH_AS(run_training(other), doctest::Contains("grid"), ConfigError);

  RunConfig vocab_mismatch = cfg;
  vocab_mismatch.model.vocab = build_layout(64, 80);
  CHECK_THROWS_WITH_AS(run_training(vocab_mismatch), doctest::Contains("vocab"), ConfigError);

  RunConfig no_data = cfg;
  no_data.dataset = dir.str() + "/absent.txt";
  CHECK_THROWS_AS(run_training(no_data), IoError);
}

TEST_CASE("transfer_params moves shared tensors bitwise and reports the rest") {
  ModelConfig stage1 = toy_config(16, 1, 2, 1, 4);
  ModelConfig stage2 = toy_config(16, 1, 2, 2, 8);
  stage2.qk_norm = true;
  ParamStore src = build_params(stage1, 3);
  for (auto& e : src.entries()) {
    for (double& v : e.value.data) v += 1.5;  // make values distinctive
  }
  ParamStore dst = build_params(stage2, 4);
  const TransferStats stats = transfer_params(src, dst);
  CHECK(stats.transferred > 0);
  CHECK(dst.at("embed").value.data == src.at("embed").value.data);
  CHECK(dst.at("layer0.attn.wq").value.data == src.at("layer0.attn.wq").value.data);
  bool fresh_has_shuffle = false, fresh_has_qk = false;
  for (const std::string& name : stats.fresh) {
    if (name.find("ts.s2.") == 0) fresh_has_shuffle = true;
    if (name.find("q_gain") != std::string::npos) fresh_has_qk = true;
  }
  CHECK(fresh_has_shuffle);
  CHECK(fresh_has_qk);

  // same name but different shape must fail loudly
  ModelConfig wider = stage1;
  wider.d = 32;
  ParamStore bad = build_params(wider, 5);
  CHECK_THROWS_WITH_AS(transfer_params(src, bad), doctest::Contains("embed"), ContractError);
}

TEST_CASE("staged training runs stage-to-stage with preserved shapes") {
  TempDir dir("ts_staged");
  RunConfig s1 = tiny_run(dir.str() + "/s1");
  s1.model = toy_config(16, 1, 2, 1, 4);
  s1.steps = 3;
  RunConfig s2 = tiny_run(dir.str() + "/s2");
  s2.model = toy_config(16, 1, 2, 2, 8);
  s2.model.qk_norm = true;
  s2.model.z_loss_weight = 1e-5;
  s2.steps = 3;
  s2.lr = 5e-4;
  for (RunConfig* c : {&s1, &s2}) {
    fs::create_directories(c->out_dir);
    generate_dataset(*c, c->dataset);
  }
  const TrainOutcome out = staged_train({s1, s2});
  CHECK(out.checkpoint.step == 3);
  CHECK(out.checkpoint.config.model.z_loss_weight == 1e-5);
  CHECK(out.checkpoint.config.model.qk_norm);

  // shrinking the grid across stages is rejected
  RunConfig bad = s1;
  bad.out_dir = dir.str() + "/bad";
  CHECK_THROWS_AS(staged_train({s2, bad}), ContractError);
}

TEST_CASE("selftest passes") {
  TempDir dir("ts_selftest");
  CHECK(selftest(dir.str()) == 0);
}

TEST_SUITE_END();
