#include <doctest.h>

#include <algorithm>

#include "core/shuffle.hpp"
#include "testutil.hpp"

using namespace ts;
using namespace ts::testutil;

namespace {

struct ShuffleRig {
  ShuffleConfig cfg;
  ParamStore store;
  Tape tape;
  BoundParams bound;

  ShuffleRig(ShuffleConfig c, int d, int h, int w, uint64_t seed = 1) : cfg(c) {
    register_shuffle_params(store, cfg, d, h, w, seed);
    bound = bind_params(tape, store);
  }
};

}  // namespace

TEST_SUITE_BEGIN("shuffle");

TEST_CASE("window index map basics") {
  const std::vector<int> id1 = window_index_map(4, 4, 1);
  for (int i = 0; i < 16; ++i) CHECK(id1[i] == i);

  const std::vector<int> m = window_index_map(4, 4, 2);
  CHECK(std::vector<int>(m.begin(), m.begin() + 4) == std::vector<int>{0, 1, 4, 5});

  CHECK_THROWS_WITH_AS(window_index_map(6, 8, 4), doctest::Contains("h=6"), ContractError);
}

TEST_CASE("window index map is a bijection for random divisible dims") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const int s = 1 + rng.uniform_int(5);
    const int h = s * (1 + rng.uniform_int(7));
    const int w = s * (1 + rng.uniform_int(7));
    std::vector<int> perm = window_index_map(h, w, s);
    REQUIRE(static_cast<int>(perm.size()) == h * w);
    std::vector<int> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < h * w; ++i) CHECK(sorted[i] == i);
  }
}

TEST_CASE("token count law across variants and sizes") {
  Rng rng(33);
  for (const auto& [h, w, s] : std::vector<std::tuple<int, int, int>>{
           {4, 4, 1}, {4, 4, 2}, {8, 8, 2}, {8, 12, 2}, {16, 16, 4}, {32, 32, 4}}) {
    const int d = 64;
    const Array x = Array::uniform({h * w, d}, -1.0, 1.0, rng);
    for (ShuffleVariant variant :
         {ShuffleVariant::kShuffle, ShuffleVariant::kDrop, ShuffleVariant::kSimple}) {
      ShuffleConfig cfg;
      cfg.s = s;
      cfg.variant = variant;
      cfg.n_blocks = 1;
      ShuffleRig rig(cfg, d, h, w);
      const Var out = fuse_visual(rig.tape, rig.tape.leaf(x), cfg, rig.bound, h, w);
      CHECK(rig.tape.value(out).shape == std::vector<int>{h * w / (s * s), d});
    }
  }
}

TEST_CASE("bypass: s=1 identity and channel-slice semantics") {
  Rng rng(35);
  {
    ShuffleConfig cfg;
    cfg.s = 1;
    cfg.bypass_mlp = true;
    ShuffleRig rig(cfg, 32, 4, 4);
    const Array x = Array::uniform({16, 32}, -1.0, 1.0, rng);
    Var xv = rig.tape.leaf(x);
    Var fused = token_shuffle(rig.tape, xv, cfg, rig.bound, 4, 4);
    CHECK(rig.tape.value(fused).data == x.data);
    Var back = token_unshuffle(rig.tape, fused, cfg, rig.bound, 4, 4);
    CHECK(rig.tape.value(back).data == x.data);
  }

  {
    const int h = 4, w = 4, d = 16, s = 2, s2 = 4, c = 4;
    ShuffleConfig cfg;
    cfg.s = s;
    cfg.bypass_mlp = true;
    ShuffleRig rig(cfg, d, h, w);
    const Array x = Array::uniform({h * w, d}, -1.0, 1.0, rng);
    const Array fused = rig.tape.value(token_shuffle(rig.tape, rig.tape.leaf(x), cfg, rig.bound, h, w));
    CHECK(fused.shape == std::vector<int>{4, 16});
    const std::vector<int> perm = window_index_map(h, w, s);
    for (int k = 0; k < 4; ++k) {
      for (int t = 0; t < s2; ++t) {
        for (int j = 0; j < c; ++j) {
          CHECK(fused.at(k, t * c + j) == x.at(perm[k * s2 + t], t * c + j));
        }
      }
    }
  }
}

TEST_CASE("bypass round trip reproduces kept slices exactly") {
  Rng rng(37);
  for (int s : {1, 2, 4}) {
    const int h = 8, w = 16, d = 128;
    ShuffleConfig cfg;
    cfg.s = s;
    cfg.bypass_mlp = true;
    ShuffleRig rig(cfg, d, h, w);
    const Array x = Array::uniform({h * w, d}, -1.0, 1.0, rng);
    Var rt = token_unshuffle(rig.tape, token_shuffle(rig.tape, rig.tape.leaf(x), cfg, rig.bound, h, w),
                             cfg, rig.bound, h, w);
    const Array& got = rig.tape.value(rt);
    const int s2 = s * s, c = d / s2;
    const std::vector<int> perm = window_index_map(h, w, s);
    std::vector<int> slot(h * w);
    for (int j = 0; j < h * w; ++j) slot[perm[j]] = j % s2;
    for (int row = 0; row < h * w; ++row) {
      for (int col = 0; col < d; ++col) {
        const bool kept = col / c == slot[row];
        CHECK(got.at(row, col) == (kept ? x.at(row, col) : 0.0));
      }
    }
  }
}

TEST_CASE("unshuffle output shape restores s^2 tokens") {
  Rng rng(39);
  ShuffleConfig cfg;
  cfg.s = 2;
  cfg.n_blocks = 2;
  const int h = 8, w = 8, d = 32;
  ShuffleRig rig(cfg, d, h, w);
  const Array fused = Array::uniform({16, d}, -1.0, 1.0, rng);
  Var out = token_unshuffle(rig.tape, rig.tape.leaf(fused), cfg, rig.bound, h, w);
  CHECK(rig.tape.value(out).shape == std::vector<int>{64, d});
}

TEST_CASE("drop variant selects each window's last token") {
  Rng rng(41);
  ShuffleConfig cfg;
  cfg.s = 2;
  cfg.variant = ShuffleVariant::kDrop;
  const int h = 4, w = 4, d = 16;
  ShuffleRig rig(cfg, d, h, w);
  const Array x = Array::uniform({16, d}, -1.0, 1.0, rng);
  const Array out = rig.tape.value(variant_forward(rig.tape, rig.tape.leaf(x), cfg, rig.bound, h, w));
  const std::vector<int> last{5, 7, 13, 15};
  REQUIRE(out.shape[0] == 4);
  for (int k = 0; k < 4; ++k) {
    for (int j = 0; j < d; ++j) CHECK(out.at(k, j) == x.at(last[k], j));
  }
}

TEST_CASE("simple variant is linear: zero weights give zero output") {
  ShuffleConfig cfg;
  cfg.s = 2;
  cfg.variant = ShuffleVariant::kSimple;
  const int h = 4, w = 4, d = 16;
  ParamStore store;
  register_shuffle_params(store, cfg, d, h, w, 1);
  for (ParamStore::Entry& e : store.entries()) {
    std::fill(e.value.data.begin(), e.value.data.end(), 0.0);
  }
  Tape tape;
  BoundParams bound = bind_params(tape, store);
  Rng rng(43);
  const Array x = Array::uniform({16, d}, -1.0, 1.0, rng);
  const Array out = tape.value(variant_forward(tape, tape.leaf(x), cfg, bound, h, w));
  CHECK(out.shape == std::vector<int>{4, 16});
  for (double v : out.data) CHECK(v == 0.0);
}

TEST_CASE("variant routing contract errors") {
  ShuffleConfig cfg;
  cfg.s = 2;
  ShuffleRig rig(cfg, 16, 4, 4);
  Var x = rig.tape.leaf(Array({16, 16}));
  CHECK_THROWS_AS(variant_forward(rig.tape, x, cfg, rig.bound, 4, 4), ContractError);

  ShuffleConfig dropped = cfg;
  dropped.variant = ShuffleVariant::kDrop;
  CHECK_THROWS_AS(token_shuffle(rig.tape, x, dropped, rig.bound, 4, 4), ContractError);

  ShuffleConfig bad = cfg;
  bad.s = 3;  // does not divide 4x4 grid
  CHECK_THROWS_AS(token_shuffle(rig.tape, x, bad, rig.bound, 4, 4), ContractError);
}

TEST_CASE("locality: a change inside one window stays in that fused position") {
  Rng rng(45);
  ShuffleConfig cfg;
  cfg.s = 2;
  cfg.n_blocks = 2;
  const int h = 8, w = 8, d = 32;
  ShuffleRig rig(cfg, d, h, w);
  Array x1 = Array::uniform({64, d}, -1.0, 1.0, rng);
  Array x2 = x1;
  const int target_window = 5;
  const std::vector<int> perm = window_index_map(h, w, cfg.s);
  for (int t = 0; t < 4; ++t) {
    const int row = perm[target_window * 4 + t];
    for (int j = 0; j < d; ++j) x2.at(row, j) += 0.25 * (t + 1);
  }
  const Array f1 = rig.tape.value(token_shuffle(rig.tape, rig.tape.leaf(x1), cfg, rig.bound, h, w));
  const Array f2 = rig.tape.value(token_shuffle(rig.tape, rig.tape.leaf(x2), cfg, rig.bound, h, w));
  for (int k = 0; k < 16; ++k) {
    bool differs = false;
    for (int j = 0; j < d; ++j) {
      if (f1.at(k, j) != f2.at(k, j)) differs = true;
    }
    CHECK(differs == (k == target_window));
  }
}

TEST_CASE("gradients flow through the shuffle/unshuffle composite") {
  Rng rng(47);
  ShuffleConfig cfg;
  cfg.s = 2;
  cfg.n_blocks = 1;
  const int h = 4, w = 4, d = 16;
  const Array x0 = Array::uniform({16, d}, -0.5, 0.5, rng);
  const Array mix = random_weights({16, d}, 49);

  ParamStore store;
  register_shuffle_params(store, cfg, d, h, w, 7);
  const auto f = [&](const Array& x) {
    Tape t;
    BoundParams b = bind_params(t, store, false);
    Var out = token_unshuffle(t, token_shuffle(t, t.leaf(x), cfg, b, h, w), cfg, b, h, w);
    return t.value(t.dot_const(out, mix)).data[0];
  };
  Tape t;
  BoundParams b = bind_params(t, store);
  Var xv = t.leaf(x0, true);
  t.backward(t.dot_const(token_unshuffle(t, token_shuffle(t, xv, cfg, b, h, w), cfg, b, h, w), mix));
  CHECK(max_grad_err(f, x0, t.grad(xv), 1e-5) < 1e-4);
}

TEST_SUITE_END();
