#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace ts {

// One flat token-id space: four special ids first, then text ids, then the
// visual codebook. Bands are contiguous and disjoint.
struct VocabLayout {
  int text_size = 0;
  int visual_size = 0;

  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kSoi = 2;  // start of image
  static constexpr int kEoi = 3;  // end of image
  static constexpr int kNumSpecial = 4;

  int total() const { return kNumSpecial + text_size + visual_size; }
  int text_begin() const { return kNumSpecial; }
  int text_end() const { return kNumSpecial + text_size; }
  int visual_begin() const { return text_end(); }
  int visual_end() const { return total(); }

  bool is_special(int id) const { return id >= 0 && id < kNumSpecial; }
  bool is_text(int id) const { return id >= text_begin() && id < text_end(); }
  bool is_visual(int id) const { return id >= visual_begin() && id < visual_end(); }

  int text_id(int word) const { return text_begin() + word; }
  int visual_id(int code) const { return visual_begin() + code; }
  int visual_code(int id) const { return id - visual_begin(); }
};

VocabLayout build_layout(int text_size, int visual_size);

// h x w raster of visual token ids, row-major.
struct TokenGrid {
  int h = 0;
  int w = 0;
  std::vector<int> ids;  // length h*w, each id in the visual band

  int cells() const { return h * w; }
  int& at(int r, int c) { return ids[static_cast<size_t>(r) * w + c]; }
  int at(int r, int c) const { return ids[static_cast<size_t>(r) * w + c]; }
};

// Synthetic caption grammar: 4 colors x 3 shapes x 5 positions = 60 captions.
struct Caption {
  int color = 0;     // red, green, blue, yellow
  int shape = 0;     // square, circle, triangle
  int position = 0;  // top-left, top-right, bottom-left, bottom-right, center

  bool operator==(const Caption&) const = default;
};

constexpr int kNumColors = 4;
constexpr int kNumShapes = 3;
constexpr int kNumPositions = 5;
constexpr int kNumCaptions = kNumColors * kNumShapes * kNumPositions;
// Tokenized caption: [COLOR c SHAPE s POSITION p] — three key/value pairs.
constexpr int kCaptionTokens = 6;

const char* color_name(int c);
const char* shape_name(int s);
const char* position_name(int p);
std::optional<Caption> parse_caption(const std::string& text);  // "red square top-left"
std::string caption_text(const Caption& c);

Caption caption_from_index(int idx);  // idx in [0, 60)
int caption_index(const Caption& c);
// Fixed 12-caption evaluation holdout; every attribute value still occurs in
// the training split (checked by tests).
bool caption_is_holdout(int idx);
std::vector<Caption> train_captions();
std::vector<Caption> holdout_captions();

// Caption -> fixed-length text-token sequence (ids in the text band) and back.
std::vector<int> tokenize_caption(const Caption& c, const VocabLayout& layout);
std::optional<Caption> detokenize_caption(const std::vector<int>& tokens, const VocabLayout& layout);

// The visual codebook is split into 4 color bands plus a background band.
struct CodebookBands {
  int band_len = 0;  // length of each color band
  int bg_begin = 0;  // background band covers [bg_begin, visual_size)
  int bg_len = 0;
};
CodebookBands codebook_bands(const VocabLayout& layout);
// Band index of a visual code: 0..3 = colors, 4 = background.
int band_of_code(const VocabLayout& layout, int code);

// Deterministic synthetic tokenizer standing in for a VQGAN. The named shape
// occupies a fixed mask at the named position; masked cells carry ids from the
// caption color's band, the rest from the background band. Every row gets a
// random phase and cell ids follow band_start + (phase + col) mod band_len, so
// within-band ids are predictable only from earlier cells of the same row.
// Each cell is then independently replaced by a uniform random visual id with
// probability noise_p.
TokenGrid render(const Caption& caption, int h, int w, double noise_p, Rng& rng,
                 const VocabLayout& layout);

// Shape mask oracle: true if cell (r, c) belongs to the shape for (shape,
// position) on an h x w grid.
bool shape_mask(int shape, int position, int h, int w, int r, int c);

struct DecodedCaption {
  Caption caption;
  double confidence = 0.0;  // min(in-mask color agreement, off-mask background agreement)
};
DecodedCaption decode_attributes(const TokenGrid& grid, const VocabLayout& layout);

// Token sequence assembly. Conditional:   [bos, caption..., soi, raster ids..., eoi, eos]
//                          unconditional: [bos, soi, raster ids..., eoi, eos]
std::vector<int> assemble_sequence(const Caption& caption, const TokenGrid& grid,
                                   const VocabLayout& layout);
std::vector<int> assemble_sequence_unconditional(const TokenGrid& grid, const VocabLayout& layout);

// -- dataset file ------------------------------------------------------------
// Header line: text_size visual_size seed
// Record line: color shape position h w id0 id1 ... id(h*w-1)
struct DatasetRecord {
  Caption caption;
  TokenGrid grid;
};

struct Dataset {
  VocabLayout layout;
  uint64_t seed = 0;
  std::vector<DatasetRecord> records;
};

void write_dataset(std::ostream& os, const Dataset& ds);
Dataset read_dataset(std::istream& is);
void write_dataset_file(const std::string& path, const Dataset& ds);
Dataset read_dataset_file(const std::string& path);

// PGM export, one gray level per codebook band.
void write_pgm(std::ostream& os, const TokenGrid& grid, const VocabLayout& layout);
void write_pgm_file(const std::string& path, const TokenGrid& grid, const VocabLayout& layout);

// Grid (de)serialization in the dataset line format, sans caption.
std::string grid_to_line(const TokenGrid& grid);
TokenGrid grid_from_line(const std::string& line);

}  // namespace ts
