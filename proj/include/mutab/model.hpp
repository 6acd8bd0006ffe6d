#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "mutab/config.hpp"
#include "mutab/nn.hpp"
#include "mutab/tensor.hpp"
#include "mutab/tokenizer.hpp"

namespace mutab {

struct ModelConfig {
  int image_size = 520;
  int channels = 512;
  int heads = 8;
  int html_blocks = 3;
  int cell_blocks = 1;
  int html_window = 300;
  int cell_window = 300;
  int max_structure_len = 800;
  int max_cell_len = 8000;
  int ffn_mult = 4;
  int gca_bottleneck = 0;  // 0 -> channels / 4
  double dropout = 0.0;
  bool prenorm = true;     // recorded for provenance; pre-norm is the built order
  bool standardize_images = false;  // per-image zero-mean/unit-variance after padding
  std::string backbone = "full";
  int structure_vocab = 0;
  int cell_vocab = 0;
  std::uint64_t seed = 1;

  void validate() const;
  int bottleneck() const { return gca_bottleneck > 0 ? gca_bottleneck : channels / 4; }

  // "tiny" is the desk-scale preset (64x64 images, 64 channels); "full" keeps
  // the 520x520 / 512-channel geometry.
  static ModelConfig preset(const std::string& name);

  std::map<std::string, std::string> to_kv() const;
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv);
};

enum class Direction { LtoR = 0, RtoL = 1 };

struct ConvLayer {
  Tensor w, b;
  int stride = 1;
  int pad = 1;
  bool relu_after = true;

  static ConvLayer create(std::size_t cin, std::size_t cout, std::size_t k, int stride, int pad,
                          bool relu_after, Rng& rng);
  Tensor forward(const Tensor& x) const;
};

// Two 3x3 convolutions behind a skip: y = relu(x + c2(relu(c1(x)))).
struct ResidualBlock {
  ConvLayer c1, c2;

  static ResidualBlock create(std::size_t channels, Rng& rng);
  Tensor forward(const Tensor& x) const;
};

struct Backbone {
  using Item = std::variant<ConvLayer, ResidualBlock, GcaBlock>;
  std::vector<Item> items;

  Tensor forward(const Tensor& x) const;
  void register_params(ParamRegistry& reg, const std::string& prefix);
  std::size_t conv_layers() const;
  std::size_t gca_blocks() const;
};

Backbone build_backbone(const ModelConfig& cfg, Rng& rng);

struct EncoderOutput {
  Tensor memory;  // [H'W' x d], 2D positional encoding already added
  std::size_t height = 0, width = 0;
};

struct HtmlDecoderOutput {
  Tensor hidden;        // [L x d] states feeding both output layers
  Tensor token_logits;  // [L x structure_vocab]
  Tensor bbox_pred;     // [L x 4], sigmoid-squashed
};

struct HtmlDecoder {
  Tensor embedding_table;  // [Vs x d]
  Tensor direction_table;  // [2 x d]; one-hot direction times a learned projection
  std::vector<AttentionBlock> blocks;
  LayerNormParams final_ln;
  Linear token_head;
  Linear bbox_head;
};

struct CellDecoder {
  Tensor embedding_table;  // [Vc x d]
  std::vector<AttentionBlock> blocks;
  LayerNormParams final_ln;
  Linear head;
};

// Decoded structure plus everything needed to run the cell decoder afterward.
struct DecodedStructure {
  std::vector<int> token_ids;                    // real tokens, no SOS/EOS
  std::vector<bool> opens_cell;
  std::vector<std::array<double, 4>> bboxes;     // one per cell, emission-position head output
  std::vector<int> cell_input_positions;         // positions in [SOS, tokens...] coordinates
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }

  EncoderOutput encode_image(const Tensor& img, Rng* dropout_rng = nullptr) const;

  // Teacher-forced pass over [SOS, t1..tN]; output position t depends only on
  // inputs at positions <= t.
  HtmlDecoderOutput html_decode_teacher_forced(const std::vector<int>& input_ids, Direction dir,
                                               const EncoderOutput& enc,
                                               Rng* dropout_rng = nullptr) const;

  // inject_rows[t] selects the html_hidden row added to the embedding of cell
  // input position t (the SEP-advance rule).
  Tensor cell_decode_teacher_forced(const std::vector<int>& input_ids, const Tensor& html_hidden,
                                    const std::vector<int>& inject_rows, const EncoderOutput& enc,
                                    Rng* dropout_rng = nullptr) const;

  DecodedStructure greedy_decode_structure(const EncoderOutput& enc,
                                           const TokenVocab& vocab) const;

  std::vector<std::string> greedy_decode_cells(const EncoderOutput& enc, const Tensor& html_hidden,
                                               const std::vector<int>& cell_input_positions,
                                               const TokenVocab& cell_vocab) const;

  void save_checkpoint(const std::string& dir) const;
  static Model load_checkpoint(const std::string& dir);

 private:
  ModelConfig cfg_;
  Backbone backbone_;
  HtmlDecoder html_;
  CellDecoder cell_;
  ParamRegistry params_;

  Tensor decoder_input(const std::vector<int>& ids, Direction dir) const;
};

// True when the id's token is '<td></td>' or the '>' closing an attributed
// '<td' run; the caller tracks the run state.
struct CellOpenTracker {
  bool in_attr_run = false;
  bool feed(const std::string& token);
};

// Injection row per cell-decoder input position: position t takes the feature
// of cell #seps(input[0..t]), clamped to the last cell. SEP advances the cell.
std::vector<int> cell_inject_rows(const std::vector<int>& cell_input_ids,
                                  const std::vector<int>& cell_input_positions);

// Splices cell contents into the structure and wraps the result as a full
// document for scoring. Header-cell contents gain <b></b> when bold_flag is
// set and the content is nonempty.
std::string assemble_html(const StructureSeq& structure, const std::vector<std::string>& cells,
                          const TokenVocab& vocab, bool bold_flag);

}  // namespace mutab
