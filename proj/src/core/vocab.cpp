#include "vocab.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace ts {

namespace {

const char* kColorNames[kNumColors] = {"red", "green", "blue", "yellow"};
const char* kShapeNames[kNumShapes] = {"square", "circle", "triangle"};
const char* kPositionNames[kNumPositions] = {"top-left", "top-right", "bottom-left", "bottom-right",
                                             "center"};

// Text-band word ids.
constexpr int kWordColorKey = 0;
constexpr int kWordShapeKey = 1;
constexpr int kWordPositionKey = 2;
constexpr int kWordColor0 = 3;
constexpr int kWordShape0 = kWordColor0 + kNumColors;
constexpr int kWordPosition0 = kWordShape0 + kNumShapes;
constexpr int kMinTextSize = kWordPosition0 + kNumPositions;

// Evaluation holdout over caption indices; chosen so every color, shape, and
// position value still appears in the 48 training captions.
constexpr int kHoldout[] = {2, 7, 13, 19, 23, 29, 31, 37, 41, 47, 53, 58};

}  // namespace

VocabLayout build_layout(int text_size, int visual_size) {
  if (text_size < 1 || visual_size < 1) {
    throw ContractError("build_layout: text_size and visual_size must be >= 1, got " +
                        std::to_string(text_size) + ", " + std::to_string(visual_size));
  }
  VocabLayout layout;
  layout.text_size = text_size;
  layout.visual_size = visual_size;
  return layout;
}

const char* color_name(int c) { return kColorNames[c]; }
const char* shape_name(int s) { return kShapeNames[s]; }
const char* position_name(int p) { return kPositionNames[p]; }

std::string caption_text(const Caption& c) {
  return std::string(kColorNames[c.color]) + " " + kShapeNames[c.shape] + " " +
         kPositionNames[c.position];
}

std::optional<Caption> parse_caption(const std::string& text) {
  std::istringstream is(text);
  std::string color, shape, position;
  if (!(is >> color >> shape >> position)) return std::nullopt;
  Caption c;
  c.color = c.shape = c.position = -1;
  for (int i = 0; i < kNumColors; ++i)
    if (color == kColorNames[i]) c.color = i;
  for (int i = 0; i < kNumShapes; ++i)
    if (shape == kShapeNames[i]) c.shape = i;
  for (int i = 0; i < kNumPositions; ++i)
    if (position == kPositionNames[i]) c.position = i;
  if (c.color < 0 || c.shape < 0 || c.position < 0) return std::nullopt;
  return c;
}

Caption caption_from_index(int idx) {
  if (idx < 0 || idx >= kNumCaptions) {
    throw ContractError("caption_from_index: index " + std::to_string(idx) + " out of range");
  }
  Caption c;
  c.color = idx / (kNumShapes * kNumPositions);
  c.shape = (idx / kNumPositions) % kNumShapes;
  c.position = idx % kNumPositions;
  return c;
}

int caption_index(const Caption& c) {
  return (c.color * kNumShapes + c.shape) * kNumPositions + c.position;
}

bool caption_is_holdout(int idx) {
  for (int h : kHoldout)
    if (h == idx) return true;
  return false;
}

std::vector<Caption> train_captions() {
  std::vector<Caption> out;
  for (int i = 0; i < kNumCaptions; ++i)
    if (!caption_is_holdout(i)) out.push_back(caption_from_index(i));
  return out;
}

std::vector<Caption> holdout_captions() {
  std::vector<Caption> out;
  for (int i = 0; i < kNumCaptions; ++i)
    if (caption_is_holdout(i)) out.push_back(caption_from_index(i));
  return out;
}

std::vector<int> tokenize_caption(const Caption& c, const VocabLayout& layout) {
  if (layout.text_size < kMinTextSize) {
    throw ContractError("tokenize_caption: text_size must be >= " + std::to_string(kMinTextSize));
  }
  return {layout.text_id(kWordColorKey),    layout.text_id(kWordColor0 + c.color),
          layout.text_id(kWordShapeKey),    layout.text_id(kWordShape0 + c.shape),
          layout.text_id(kWordPositionKey), layout.text_id(kWordPosition0 + c.position)};
}

std::optional<Caption> detokenize_caption(const std::vector<int>& tokens, const VocabLayout& layout) {
  if (tokens.size() != kCaptionTokens) return std::nullopt;
  for (int id : tokens)
    if (!layout.is_text(id)) return std::nullopt;
  const int w1 = tokens[1] - layout.text_begin() - kWordColor0;
  const int w3 = tokens[3] - layout.text_begin() - kWordShape0;
  const int w5 = tokens[5] - layout.text_begin() - kWordPosition0;
  if (w1 < 0 || w1 >= kNumColors || w3 < 0 || w3 >= kNumShapes || w5 < 0 || w5 >= kNumPositions) {
    return std::nullopt;
  }
  return Caption{w1, w3, w5};
}

CodebookBands codebook_bands(const VocabLayout& layout) {
  CodebookBands b;
  b.band_len = layout.visual_size / (kNumColors + 1);
  b.bg_begin = kNumColors * b.band_len;
  b.bg_len = layout.visual_size - b.bg_begin;
  return b;
}

int band_of_code(const VocabLayout& layout, int code) {
  const CodebookBands b = codebook_bands(layout);
  if (code < b.bg_begin) return code / b.band_len;
  return kNumColors;
}

bool shape_mask(int shape, int position, int h, int w, int r, int c) {
  const int rh = h / 2, rw = w / 2;
  int r0 = 0, c0 = 0;
  switch (position) {
    case 0: r0 = 0, c0 = 0; break;
    case 1: r0 = 0, c0 = w - rw; break;
    case 2: r0 = h - rh, c0 = 0; break;
    case 3: r0 = h - rh, c0 = w - rw; break;
    case 4: r0 = (h - rh) / 2, c0 = (w - rw) / 2; break;
    default: throw ContractError("shape_mask: bad position " + std::to_string(position));
  }
  const int lr = r - r0, lc = c - c0;
  if (lr < 0 || lr >= rh || lc < 0 || lc >= rw) return false;
  switch (shape) {
    case 0:  // square: the full region
      return true;
    case 1: {  // circle: inscribed ellipse
      const double y = (lr + 0.5 - rh / 2.0) / (rh / 2.0);
      const double x = (lc + 0.5 - rw / 2.0) / (rw / 2.0);
      return y * y + x * x <= 1.0;
    }
    case 2:  // triangle: at or below the region diagonal
      return static_cast<int64_t>(lc) * (rh - 1) <= static_cast<int64_t>(lr) * (rw - 1);
    default: throw ContractError("shape_mask: bad shape " + std::to_string(shape));
  }
}

TokenGrid render(const Caption& caption, int h, int w, double noise_p, Rng& rng,
                 const VocabLayout& layout) {
  if (h < 4 || w < 4) {
    throw ContractError("render: grid " + std::to_string(h) + "x" + std::to_string(w) +
                        " too small to place the shape (need at least 4x4)");
  }
  if (noise_p < 0.0 || noise_p >= 0.5) {
    throw ContractError("render: noise_p must lie in [0, 0.5)");
  }
  const CodebookBands bands = codebook_bands(layout);
  if (bands.band_len < 2 || bands.bg_len < 2) {
    throw ContractError("render: visual_size " + std::to_string(layout.visual_size) +
                        " too small for 5 codebook bands");
  }

  // Per-row texture phases come first so the base pattern is identical for any
  // noise_p under the same rng state.
  std::vector<int> phase(h);
  for (int r = 0; r < h; ++r) phase[r] = rng.uniform_int(1 << 20);

  TokenGrid grid;
  grid.h = h;
  grid.w = w;
  grid.ids.resize(static_cast<size_t>(h) * w);
  const int color_begin = caption.color * bands.band_len;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      int code;
      if (shape_mask(caption.shape, caption.position, h, w, r, c)) {
        code = color_begin + (phase[r] + c) % bands.band_len;
      } else {
        code = bands.bg_begin + (phase[r] + c) % bands.bg_len;
      }
      grid.at(r, c) = layout.visual_id(code);
    }
  }
  if (noise_p > 0.0) {
    for (int i = 0; i < h * w; ++i) {
      if (rng.bernoulli(noise_p)) grid.ids[i] = layout.visual_id(rng.uniform_int(layout.visual_size));
    }
  }
  return grid;
}

DecodedCaption decode_attributes(const TokenGrid& grid, const VocabLayout& layout) {
  const int cells = grid.cells();
  std::vector<int> band(cells);
  for (int i = 0; i < cells; ++i) {
    const int id = grid.ids[i];
    if (!layout.is_visual(id)) {
      throw ContractError("decode_attributes: id " + std::to_string(id) + " is not in the visual band");
    }
    band[i] = band_of_code(layout, layout.visual_code(id));
  }

  int best_idx = 0;
  int best_score = -1;
  for (int idx = 0; idx < kNumCaptions; ++idx) {
    const Caption cand = caption_from_index(idx);
    int score = 0;
    for (int r = 0; r < grid.h; ++r) {
      for (int c = 0; c < grid.w; ++c) {
        const bool in_mask = shape_mask(cand.shape, cand.position, grid.h, grid.w, r, c);
        const int want = in_mask ? cand.color : kNumColors;
        if (band[static_cast<size_t>(r) * grid.w + c] == want) ++score;
      }
    }
    if (score > best_score) {
      best_score = score;
      best_idx = idx;
    }
  }

  const Caption best = caption_from_index(best_idx);
  int mask_cells = 0, mask_hits = 0, bg_cells = 0, bg_hits = 0;
  for (int r = 0; r < grid.h; ++r) {
    for (int c = 0; c < grid.w; ++c) {
      const int b = band[static_cast<size_t>(r) * grid.w + c];
      if (shape_mask(best.shape, best.position, grid.h, grid.w, r, c)) {
        ++mask_cells;
        if (b == best.color) ++mask_hits;
      } else {
        ++bg_cells;
        if (b == kNumColors) ++bg_hits;
      }
    }
  }
  DecodedCaption out;
  out.caption = best;
  const double ma = mask_cells > 0 ? static_cast<double>(mask_hits) / mask_cells : 0.0;
  const double ba = bg_cells > 0 ? static_cast<double>(bg_hits) / bg_cells : 1.0;
  out.confidence = std::min(ma, ba);
  return out;
}

std::vector<int> assemble_sequence(const Caption& caption, const TokenGrid& grid,
                                   const VocabLayout& layout) {
  std::vector<int> seq;
  seq.reserve(grid.cells() + kCaptionTokens + 4);
  seq.push_back(VocabLayout::kBos);
  const std::vector<int> cap = tokenize_caption(caption, layout);
  seq.insert(seq.end(), cap.begin(), cap.end());
  seq.push_back(VocabLayout::kSoi);
  seq.insert(seq.end(), grid.ids.begin(), grid.ids.end());
  seq.push_back(VocabLayout::kEoi);
  seq.push_back(VocabLayout::kEos);
  return seq;
}

std::vector<int> assemble_sequence_unconditional(const TokenGrid& grid, const VocabLayout& layout) {
  (void)layout;
  std::vector<int> seq;
  seq.reserve(grid.cells() + 4);
  seq.push_back(VocabLayout::kBos);
  seq.push_back(VocabLayout::kSoi);
  seq.insert(seq.end(), grid.ids.begin(), grid.ids.end());
  seq.push_back(VocabLayout::kEoi);
  seq.push_back(VocabLayout::kEos);
  return seq;
}

void write_dataset(std::ostream& os, const Dataset& ds) {
  os << ds.layout.text_size << " " << ds.layout.visual_size << " " << ds.seed << "\n";
  for (const DatasetRecord& rec : ds.records) {
    os << rec.caption.color << " " << rec.caption.shape << " " << rec.caption.position << " "
       << rec.grid.h << " " << rec.grid.w;
    for (int id : rec.grid.ids) os << " " << id;
    os << "\n";
  }
}

Dataset read_dataset(std::istream& is) {
  Dataset ds;
  std::string line;
  if (!std::getline(is, line)) throw IoError("dataset: missing header line");
  {
    std::istringstream hs(line);
    int text_size = 0, visual_size = 0;
    uint64_t seed = 0;
    if (!(hs >> text_size >> visual_size >> seed)) throw IoError("dataset: unparsable header: " + line);
    ds.layout = build_layout(text_size, visual_size);
    ds.seed = seed;
  }
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    DatasetRecord rec;
    if (!(ls >> rec.caption.color >> rec.caption.shape >> rec.caption.position >> rec.grid.h >>
          rec.grid.w)) {
      throw IoError("dataset: unparsable record at line " + std::to_string(lineno));
    }
    if (rec.caption.color < 0 || rec.caption.color >= kNumColors || rec.caption.shape < 0 ||
        rec.caption.shape >= kNumShapes || rec.caption.position < 0 ||
        rec.caption.position >= kNumPositions) {
      throw IoError("dataset: caption out of range at line " + std::to_string(lineno));
    }
    if (rec.grid.h < 1 || rec.grid.w < 1) {
      throw IoError("dataset: bad grid dims at line " + std::to_string(lineno));
    }
    rec.grid.ids.resize(static_cast<size_t>(rec.grid.h) * rec.grid.w);
    for (int& id : rec.grid.ids) {
      if (!(ls >> id)) throw IoError("dataset: truncated record at line " + std::to_string(lineno));
      if (!ds.layout.is_visual(id)) {
        throw IoError("dataset: id " + std::to_string(id) + " outside visual band at line " +
                      std::to_string(lineno));
      }
    }
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

void write_dataset_file(const std::string& path, const Dataset& ds) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_dataset(os, ds);
  if (!os) throw IoError("write failed: " + path);
}

Dataset read_dataset_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  return read_dataset(is);
}

void write_pgm(std::ostream& os, const TokenGrid& grid, const VocabLayout& layout) {
  static const int kLevels[kNumColors + 1] = {40, 90, 140, 190, 230};
  os << "P2\n" << grid.w << " " << grid.h << "\n255\n";
  for (int r = 0; r < grid.h; ++r) {
    for (int c = 0; c < grid.w; ++c) {
      if (c) os << " ";
      os << kLevels[band_of_code(layout, layout.visual_code(grid.at(r, c)))];
    }
    os << "\n";
  }
}

void write_pgm_file(const std::string& path, const TokenGrid& grid, const VocabLayout& layout) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_pgm(os, grid, layout);
}

std::string grid_to_line(const TokenGrid& grid) {
  std::ostringstream os;
  os << grid.h << " " << grid.w;
  for (int id : grid.ids) os << " " << id;
  return os.str();
}

TokenGrid grid_from_line(const std::string& line) {
  std::istringstream is(line);
  TokenGrid grid;
  if (!(is >> grid.h >> grid.w) || grid.h < 1 || grid.w < 1) {
    throw IoError("grid_from_line: unparsable dims in: " + line);
  }
  grid.ids.resize(static_cast<size_t>(grid.h) * grid.w);
  for (int& id : grid.ids) {
    if (!(is >> id)) throw IoError("grid_from_line: truncated ids in: " + line);
  }
  return grid;
}

}  // namespace ts
