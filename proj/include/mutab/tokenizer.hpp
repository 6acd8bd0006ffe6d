#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace mutab {

// Bidirectional token <-> id map with fixed special ids. The structure vocab
// reserves PAD/SOS/EOS; the cell vocab additionally reserves SEP.
class TokenVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kSos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;

  static TokenVocab structure_vocab();           // PAD, SOS, EOS
  static TokenVocab cell_vocab();                // PAD, SOS, EOS, SEP

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }
  bool has_sep() const { return has_sep_; }

  int id_of(const std::string& token) const;     // throws on unknown
  std::optional<int> try_id(const std::string& token) const;
  // In build mode unknown tokens extend the vocab; frozen mode throws.
  int intern(const std::string& token);
  const std::string& token_of(int id) const;
  std::size_t size() const { return tokens_.size(); }

  void save(const std::string& path) const;      // one token per line
  static TokenVocab load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  bool frozen_ = false;
  bool has_sep_ = false;

  void push(const std::string& t);
};

// Structure token sequence plus per-token flags. `opens_cell` marks the
// merged '<td></td>' token or the '>' that closes an attributed '<td' run;
// `in_header` marks tokens inside <thead>.
struct StructureSeq {
  std::vector<int> ids;
  std::vector<bool> opens_cell;
  std::vector<bool> in_header;

  std::size_t cell_count() const;
  std::vector<std::size_t> cell_positions() const;  // indices of opening tokens
};

// Flat character-id stream for all cells in reading order, SEP-delimited,
// plus the alignment from cell ordinal to its opening token in the structure.
struct CellSeq {
  std::vector<int> ids;
  std::vector<std::size_t> alignment;  // cell ordinal -> structure index
  std::size_t segment_count = 0;
};

struct TokenizerOptions {
  // Multi-token patterns fused into single vocab entries, applied after the
  // plain-cell merge. Empty by default.
  std::vector<std::vector<std::string>> fused_patterns;
  // Strip <b>/</b> wrappers from header cell contents; set when the whole
  // dataset has bold headers, reinserted at assembly time.
  bool strip_header_bold = false;
};

StructureSeq tokenize_structure(const std::vector<std::string>& html_tokens, TokenVocab& vocab,
                                const TokenizerOptions& opts = {});

std::string detokenize_structure(const StructureSeq& seq, const TokenVocab& vocab,
                                 bool bold_flag = false);

CellSeq tokenize_cells(const std::vector<std::string>& cells, const StructureSeq& structure,
                       TokenVocab& cell_vocab, const TokenizerOptions& opts = {});

enum class Complexity { Simple, Complex };

// Complex when any cell is merged (a colspan/rowspan attribute appears).
Complexity classify_complexity(const StructureSeq& seq, const TokenVocab& vocab);

// One tokenized training sample as produced by the data pipeline.
struct CorpusSample {
  std::vector<std::string> structure_tokens;
  std::vector<std::string> cells;        // raw content strings
  std::vector<bool> cell_in_header;
};

// Deterministic vocab construction: specials first, then first-seen order.
std::pair<TokenVocab, TokenVocab> build_vocab(const std::vector<CorpusSample>& corpus,
                                              const TokenizerOptions& opts = {});

// True when every non-empty header cell in the corpus is wrapped in <b></b>
// and at least one such cell exists.
bool detect_header_bold(const std::vector<CorpusSample>& corpus);

// Splits a cell content string into character tokens, keeping inline tags
// such as <b> and </b> whole.
std::vector<std::string> split_cell_chars(const std::string& content);

// Rebuilds flags for an already-tokenized id sequence (e.g. decoder output)
// without validating nesting; used on model predictions.
StructureSeq structure_from_ids(const std::vector<int>& ids, const TokenVocab& vocab);

}  // namespace mutab
