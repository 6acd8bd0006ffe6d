#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mutab/model.hpp"
#include "mutab/png_io.hpp"
#include "mutab/tensor.hpp"
#include "mutab/tokenizer.hpp"

namespace mutab {

struct CellAnnotation {
  std::string content;
  std::optional<std::array<double, 4>> bbox;  // x0, y0, x1, y1 in source pixels
};

struct TableSample {
  std::string filename;
  GrayImage image;  // may be empty when only annotations were loaded
  std::vector<std::string> structure_tokens;
  std::vector<CellAnnotation> cells;
  std::string split = "train";
};

struct DatasetStats {
  std::size_t lines = 0;
  std::size_t yielded = 0;
  std::size_t skipped_malformed = 0;
  std::size_t filtered_split = 0;
  std::size_t filtered_short = 0;
};

// JSON Lines loader. Each line holds {filename, split, html:{structure:
// {tokens:[...]}, cells:[{tokens:[...], bbox:[x0,y0,x1,y1]}]}}. Samples of
// other splits are dropped (an empty split accepts everything); `min_tokens`
// keeps only tables with at least that many raw structure tokens; malformed
// lines are skipped and counted.
std::vector<TableSample> load_jsonl_dataset(const std::string& path, const std::string& split,
                                            std::size_t min_tokens = 0,
                                            DatasetStats* stats = nullptr);

void save_jsonl_dataset(const std::string& path, const std::vector<TableSample>& samples);

struct ScaleRecord {
  double scale = 1.0;        // source -> resized multiplier
  std::size_t resized_h = 0;  // before zero padding
  std::size_t resized_w = 0;
  std::size_t target = 0;
};

// Aspect-preserving resize so the longer side equals `target`, zero padding
// right/bottom; values stay in [0, 1]. With `standardize` the padded image is
// shifted and scaled to zero mean and unit variance.
std::pair<Tensor, ScaleRecord> preprocess_image(const GrayImage& raw, std::size_t target,
                                                bool standardize = false);

struct NormalizedBoxes {
  std::vector<std::array<double, 4>> boxes;      // aligned with the input order
  std::vector<std::uint8_t> supervised;          // absent boxes get 0
  std::size_t clamped = 0;
};

NormalizedBoxes normalize_bboxes(const std::vector<CellAnnotation>& cells,
                                 const ScaleRecord& rec);
std::array<double, 4> denormalize_bbox(const std::array<double, 4>& box, const ScaleRecord& rec);

struct SynthSpec {
  int rows = 3;
  int cols = 3;
  double merge_prob = 0.0;
  int image_size = 64;
  double empty_cell_prob = 0.08;
};

struct SyntheticTable {
  TableSample sample;
  std::size_t expected_tree_nodes = 0;  // table + thead + tbody + rows + cells
  bool complex = false;
};

// Deterministic under the seed: grid with optional merges, short alphanumeric
// contents rendered as 3x3 glyph blobs, borders, and bboxes tight around the
// glyphs of each cell.
SyntheticTable generate_synthetic_table(std::uint64_t seed, const SynthSpec& spec);

struct BatchItem {
  std::string filename;
  Tensor image;                          // [1 x S x S]
  ScaleRecord scale;
  StructureSeq structure;
  bool complex = false;
  std::vector<int> ltor_input, ltor_target;
  std::vector<int> rtol_input, rtol_target;
  std::vector<std::uint8_t> target_mask;  // non-pad positions of the targets
  std::vector<int> cell_input, cell_target;
  std::vector<std::uint8_t> cell_mask;
  std::vector<int> cell_positions;        // input coords of each cell opener
  std::vector<int> inject_rows;           // per cell_input position
  Tensor bbox_targets;                    // [Lt x 4] aligned with ltor_target
  std::vector<std::uint8_t> bbox_mask;
};

struct Batch {
  std::vector<BatchItem> items;
  std::size_t skipped_overlength = 0;
  std::size_t structure_width = 0;  // padded target length
  std::size_t cell_width = 0;
};

// Tokenizes, wraps with SOS/EOS, pads to the batch maximum, and builds the
// mirrored right-to-left targets plus bbox supervision masks. Samples beyond
// the configured caps are skipped and counted.
Batch collate(const std::vector<TableSample>& samples, TokenVocab& structure_vocab,
              TokenVocab& cell_vocab, const ModelConfig& cfg, const TokenizerOptions& opts = {});

}  // namespace mutab
