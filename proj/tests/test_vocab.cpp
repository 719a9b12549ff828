#include <doctest.h>

#include <set>
#include <sstream>

#include "core/vocab.hpp"
#include "testutil.hpp"

using namespace ts;

TEST_SUITE_BEGIN("vocab");

TEST_CASE("layout bands are contiguous, disjoint, and complete") {
  const VocabLayout layout = build_layout(64, 512);
  CHECK(layout.total() == 580);
  for (int id = 0; id < layout.total(); ++id) {
    const int claims = layout.is_special(id) + layout.is_text(id) + layout.is_visual(id);
    CHECK(claims == 1);
  }
  CHECK(layout.is_visual(layout.visual_begin()));
  CHECK_FALSE(layout.is_visual(layout.text_end() - 1));
  CHECK(layout.is_text(layout.text_end() - 1));

  // paper-scale codebook accepted without overflow
  const VocabLayout big = build_layout(128000, 16384);
  CHECK(big.total() == 128000 + 16384 + 4);
  CHECK(big.is_visual(big.total() - 1));

  CHECK_THROWS_AS(build_layout(0, 512), ContractError);
  CHECK_THROWS_AS(build_layout(64, 0), ContractError);
}

TEST_CASE("caption grammar round trip and fixed length") {
  const VocabLayout layout = build_layout(64, 512);
  for (int i = 0; i < kNumCaptions; ++i) {
    const Caption c = caption_from_index(i);
    CHECK(caption_index(c) == i);
    const std::vector<int> toks = tokenize_caption(c, layout);
    CHECK(toks.size() == kCaptionTokens);
    for (int id : toks) CHECK(layout.is_text(id));
    const auto back = detokenize_caption(toks, layout);
    REQUIRE(back.has_value());
    CHECK(*back == c);
    const auto parsed = parse_caption(caption_text(c));
    REQUIRE(parsed.has_value());
    CHECK(*parsed == c);
  }
  CHECK_FALSE(parse_caption("mauve blob nowhere").has_value());
}

TEST_CASE("holdout split keeps every attribute value trainable") {
  int held = 0;
  std::set<int> colors, shapes, positions;
  for (int i = 0; i < kNumCaptions; ++i) {
    if (caption_is_holdout(i)) {
      ++held;
      continue;
    }
    const Caption c = caption_from_index(i);
    colors.insert(c.color);
    shapes.insert(c.shape);
    positions.insert(c.position);
  }
  CHECK(held == 12);
  CHECK(colors.size() == kNumColors);
  CHECK(shapes.size() == kNumShapes);
  CHECK(positions.size() == kNumPositions);
  CHECK(train_captions().size() + holdout_captions().size() == kNumCaptions);
}

TEST_CASE("render is deterministic and respects bands") {
  const VocabLayout layout = build_layout(64, 512);
  const Caption c{0, 0, 0};  // red square top-left
  Rng r1(3), r2(3);
  const TokenGrid a = render(c, 16, 16, 0.0, r1, layout);
  const TokenGrid b = render(c, 16, 16, 0.0, r2, layout);
  CHECK(a.ids == b.ids);

  for (int r = 0; r < 16; ++r) {
    for (int col = 0; col < 16; ++col) {
      const int band = band_of_code(layout, layout.visual_code(a.at(r, col)));
      if (shape_mask(c.shape, c.position, 16, 16, r, col)) {
        CHECK(band == 0);
      } else {
        CHECK(band == kNumColors);
      }
    }
  }
  const DecodedCaption dec = decode_attributes(a, layout);
  CHECK(dec.caption == c);
  CHECK(dec.confidence == 1.0);
}

TEST_CASE("render/decode inverse over the whole grammar at zero noise") {
  const VocabLayout layout = build_layout(64, 512);
  for (int i = 0; i < kNumCaptions; ++i) {
    Rng rng(1000 + i);
    const Caption c = caption_from_index(i);
    const TokenGrid g = render(c, 16, 16, 0.0, rng, layout);
    const DecodedCaption dec = decode_attributes(g, layout);
    CHECK(dec.caption == c);
    CHECK(dec.confidence == 1.0);
  }
}

TEST_CASE("noise replacement rate lands in the binomial window") {
  const VocabLayout layout = build_layout(64, 512);
  const Caption c{1, 1, 2};
  // 40 grids of 16x16 = 10240 cells
  int off = 0, cells = 0;
  for (int k = 0; k < 40; ++k) {
    Rng base_rng(500 + k), noisy_rng(500 + k);
    const TokenGrid base = render(c, 16, 16, 0.0, base_rng, layout);
    const TokenGrid noisy = render(c, 16, 16, 0.1, noisy_rng, layout);
    for (int i = 0; i < base.cells(); ++i) {
      ++cells;
      if (base.ids[i] != noisy.ids[i]) ++off;
    }
  }
  const double frac = static_cast<double>(off) / cells;
  CHECK(frac >= 0.08);
  CHECK(frac <= 0.12);
}

TEST_CASE("decode under noise recovers the caption almost always") {
  const VocabLayout layout = build_layout(64, 512);
  int good = 0;
  const int trials = 1000;
  Rng rng(77);
  for (int i = 0; i < trials; ++i) {
    const Caption c = caption_from_index(i % kNumCaptions);
    const TokenGrid g = render(c, 16, 16, 0.1, rng, layout);
    if (decode_attributes(g, layout).caption == c) ++good;
  }
  CHECK(good >= 990);
}

TEST_CASE("all-background grid decodes with confidence below threshold") {
  const VocabLayout layout = build_layout(64, 512);
  const CodebookBands bands = codebook_bands(layout);
  TokenGrid g;
  g.h = g.w = 16;
  g.ids.assign(256, layout.visual_id(bands.bg_begin + 3));
  CHECK(decode_attributes(g, layout).confidence < 0.5);
}

TEST_CASE("render contract errors") {
  const VocabLayout layout = build_layout(64, 512);
  Rng rng(1);
  CHECK_THROWS_WITH_AS(render({0, 0, 0}, 3, 16, 0.0, rng, layout), doctest::Contains("too small"),
                       ContractError);
  CHECK_THROWS_AS(render({0, 0, 0}, 16, 16, 0.5, rng, layout), ContractError);
  CHECK_THROWS_AS(render({0, 0, 0}, 16, 16, -0.1, rng, layout), ContractError);
}

TEST_CASE("sequence assembly lengths") {
  const VocabLayout layout = build_layout(64, 512);
  Rng rng(9);
  const Caption c{2, 1, 4};
  const TokenGrid g = render(c, 16, 16, 0.0, rng, layout);
  const std::vector<int> seq = assemble_sequence(c, g, layout);
  CHECK(seq.size() == 6 + 256 + 4);
  CHECK(seq.front() == VocabLayout::kBos);
  CHECK(seq[7] == VocabLayout::kSoi);
  CHECK(seq[seq.size() - 2] == VocabLayout::kEoi);
  CHECK(seq.back() == VocabLayout::kEos);

  const std::vector<int> un = assemble_sequence_unconditional(g, layout);
  CHECK(un.size() == 256 + 4);
  CHECK(un[1] == VocabLayout::kSoi);

  // paper-scale arithmetic: 1024x1024 image with a down-16 tokenizer
  const TokenGrid big{64, 64, std::vector<int>(4096, layout.visual_begin())};
  CHECK(assemble_sequence_unconditional(big, layout).size() == 4096 + 4);
}

TEST_CASE("grid line and dataset round trips") {
  const VocabLayout layout = build_layout(64, 512);
  Rng rng(21);
  Dataset ds;
  ds.layout = layout;
  ds.seed = 21;
  for (int i = 0; i < 5; ++i) {
    const Caption c = caption_from_index(i * 11 % kNumCaptions);
    ds.records.push_back({c, render(c, 8, 8, 0.2, rng, layout)});
  }
  std::stringstream ss;
  write_dataset(ss, ds);
  const Dataset back = read_dataset(ss);
  CHECK(back.seed == ds.seed);
  CHECK(back.layout.text_size == layout.text_size);
  REQUIRE(back.records.size() == ds.records.size());
  for (size_t i = 0; i < ds.records.size(); ++i) {
    CHECK(back.records[i].caption == ds.records[i].caption);
    CHECK(back.records[i].grid.ids == ds.records[i].grid.ids);
  }

  const TokenGrid g = ds.records[0].grid;
  CHECK(grid_from_line(grid_to_line(g)).ids == g.ids);

  std::stringstream bad("64 512 1\n0 0 0 4 4 1 2 3\n");
  CHECK_THROWS_AS(read_dataset(bad), IoError);
  std::stringstream bad2("64 512 1\n0 0 0 4 4 " + std::string("0 ") + "1 2 3 4 5 6 7 8 9 10 11 12 13 14 15\n");
  CHECK_THROWS_AS(read_dataset(bad2), IoError);  // id 0 is bos, not visual
}

TEST_CASE("pgm export shape") {
  const VocabLayout layout = build_layout(64, 512);
  Rng rng(5);
  const TokenGrid g = render({3, 2, 4}, 8, 8, 0.0, rng, layout);
  std::stringstream ss;
  write_pgm(ss, g, layout);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  ss >> magic >> w >> h >> maxv;
  CHECK(magic == "P2");
  CHECK(w == 8);
  CHECK(h == 8);
  CHECK(maxv == 255);
  int count = 0, v;
  while (ss >> v) {
    CHECK(v <= 255);
    ++count;
  }
  CHECK(count == 64);
}

TEST_SUITE_END();
