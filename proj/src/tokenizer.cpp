#include "mutab/tokenizer.hpp"

#include <fstream>
#include <stdexcept>

namespace mutab {

namespace {

const std::string kPadTok = "<PAD>";
const std::string kSosTok = "<SOS>";
const std::string kEosTok = "<EOS>";
const std::string kSepTok = "<SEP>";

bool is_attr_token(const std::string& t) { return !t.empty() && t[0] == ' '; }

bool has_span_attr(const std::string& t) {
  return t.find("colspan") != std::string::npos || t.find("rowspan") != std::string::npos;
}

[[noreturn]] void structure_error(const std::string& what, std::size_t index) {
  throw std::invalid_argument("structure error at token " + std::to_string(index) + ": " + what);
}

}  // namespace

void TokenVocab::push(const std::string& t) {
  ids_.emplace(t, static_cast<int>(tokens_.size()));
  tokens_.push_back(t);
}

TokenVocab TokenVocab::structure_vocab() {
  TokenVocab v;
  v.push(kPadTok);
  v.push(kSosTok);
  v.push(kEosTok);
  return v;
}

TokenVocab TokenVocab::cell_vocab() {
  TokenVocab v;
  v.push(kPadTok);
  v.push(kSosTok);
  v.push(kEosTok);
  v.push(kSepTok);
  v.has_sep_ = true;
  return v;
}

int TokenVocab::id_of(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) throw std::invalid_argument("unknown token: '" + token + "'");
  return it->second;
}

std::optional<int> TokenVocab::try_id(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int TokenVocab::intern(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  if (frozen_) throw std::invalid_argument("out-of-vocabulary token: '" + token + "'");
  push(token);
  return static_cast<int>(tokens_.size()) - 1;
}

const std::string& TokenVocab::token_of(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::invalid_argument("token id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

void TokenVocab::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open vocab file for write: " + path);
  for (const auto& t : tokens_) os << t << '\n';
  if (!os) throw std::runtime_error("vocab write failed: " + path);
}

TokenVocab TokenVocab::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open vocab file: " + path);
  TokenVocab v;
  std::string line;
  while (std::getline(is, line)) v.push(line);
  if (v.tokens_.size() < 3 || v.tokens_[0] != kPadTok || v.tokens_[1] != kSosTok ||
      v.tokens_[2] != kEosTok) {
    throw std::runtime_error("vocab file missing special tokens: " + path);
  }
  v.has_sep_ = v.tokens_.size() > 3 && v.tokens_[3] == kSepTok;
  v.frozen_ = true;
  return v;
}

std::size_t StructureSeq::cell_count() const {
  std::size_t n = 0;
  for (bool b : opens_cell) n += b ? 1 : 0;
  return n;
}

std::vector<std::size_t> StructureSeq::cell_positions() const {
  std::vector<std::size_t> p;
  for (std::size_t i = 0; i < opens_cell.size(); ++i)
    if (opens_cell[i]) p.push_back(i);
  return p;
}

StructureSeq tokenize_structure(const std::vector<std::string>& html_tokens, TokenVocab& vocab,
                                const TokenizerOptions& opts) {
  // Pass 1: merge adjacent plain cell pairs and validate nesting.
  struct Tok {
    std::string text;
    bool opens_cell;
    bool in_header;
  };
  std::vector<Tok> merged;
  int header_depth = 0;
  std::vector<std::string> stack;
  enum class State { Normal, InAttrs, OpenCell };
  State state = State::Normal;

  for (std::size_t i = 0; i < html_tokens.size(); ++i) {
    const std::string& t = html_tokens[i];
    switch (state) {
      case State::Normal:
        if (t == "<td>") {
          if (i + 1 < html_tokens.size() && html_tokens[i + 1] == "</td>") {
            merged.push_back({"<td></td>", true, header_depth > 0});
            ++i;
          } else {
            structure_error("'<td>' without an adjacent '</td>'", i);
          }
        } else if (t == "<td") {
          merged.push_back({t, false, header_depth > 0});
          state = State::InAttrs;
        } else if (t == "</td>") {
          structure_error("'</td>' without an open cell", i);
        } else if (t == "<thead>") {
          ++header_depth;
          stack.push_back(t);
          merged.push_back({t, false, header_depth > 0});
        } else if (t == "</thead>") {
          if (stack.empty() || stack.back() != "<thead>") structure_error("unbalanced '</thead>'", i);
          merged.push_back({t, false, header_depth > 0});
          stack.pop_back();
          --header_depth;
        } else if (t == "<tbody>" || t == "<tr>") {
          stack.push_back(t);
          merged.push_back({t, false, header_depth > 0});
        } else if (t == "</tbody>" || t == "</tr>") {
          std::string open = t == "</tbody>" ? "<tbody>" : "<tr>";
          if (stack.empty() || stack.back() != open) structure_error("unbalanced '" + t + "'", i);
          stack.pop_back();
          merged.push_back({t, false, header_depth > 0});
        } else {
          merged.push_back({t, false, header_depth > 0});
        }
        break;
      case State::InAttrs:
        if (t == ">") {
          // the closing '>' of an attributed '<td' opens the cell
          merged.push_back({t, true, header_depth > 0});
          state = State::OpenCell;
        } else if (is_attr_token(t)) {
          merged.push_back({t, false, header_depth > 0});
        } else {
          structure_error("unexpected token '" + t + "' inside '<td' attributes", i);
        }
        break;
      case State::OpenCell:
        if (t == "</td>") {
          merged.push_back({t, false, header_depth > 0});
          state = State::Normal;
        } else {
          structure_error("expected '</td>' after attributed cell, got '" + t + "'", i);
        }
        break;
    }
  }
  if (state != State::Normal) structure_error("unterminated cell", html_tokens.size());
  if (!stack.empty()) structure_error("unclosed '" + stack.back() + "'", html_tokens.size());

  // Pass 2: optional fusion of configured frequent patterns.
  if (!opts.fused_patterns.empty()) {
    std::vector<Tok> fused;
    for (std::size_t i = 0; i < merged.size();) {
      bool hit = false;
      for (const auto& pat : opts.fused_patterns) {
        if (pat.empty() || i + pat.size() > merged.size()) continue;
        bool match = true;
        bool opens = false;
        for (std::size_t k = 0; k < pat.size(); ++k) {
          if (merged[i + k].text != pat[k]) {
            match = false;
            break;
          }
          opens = opens || merged[i + k].opens_cell;
        }
        if (match) {
          std::string joined;
          for (const auto& p : pat) joined += p;
          fused.push_back({joined, opens, merged[i].in_header});
          i += pat.size();
          hit = true;
          break;
        }
      }
      if (!hit) {
        fused.push_back(merged[i]);
        ++i;
      }
    }
    merged = std::move(fused);
  }

  StructureSeq seq;
  seq.ids.reserve(merged.size());
  for (const auto& tok : merged) {
    seq.ids.push_back(vocab.frozen() ? vocab.id_of(tok.text) : vocab.intern(tok.text));
    seq.opens_cell.push_back(tok.opens_cell);
    seq.in_header.push_back(tok.in_header);
  }
  return seq;
}

std::string detokenize_structure(const StructureSeq& seq, const TokenVocab& vocab, bool) {
  std::string out;
  enum class State { Normal, InAttrs, OpenCell };
  State state = State::Normal;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const std::string& t = vocab.token_of(seq.ids[i]);
    switch (state) {
      case State::Normal:
        if (t == "</td>" || t == ">") structure_error("'" + t + "' without an open cell", i);
        if (t == "<td") state = State::InAttrs;
        break;
      case State::InAttrs:
        if (t == ">")
          state = State::OpenCell;
        else if (!is_attr_token(t))
          structure_error("unexpected '" + t + "' inside '<td' attributes", i);
        break;
      case State::OpenCell:
        if (t != "</td>") structure_error("expected '</td>', got '" + t + "'", i);
        state = State::Normal;
        break;
    }
    out += t;
  }
  if (state != State::Normal) structure_error("unterminated cell", seq.ids.size());
  return out;
}

std::vector<std::string> split_cell_chars(const std::string& content) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < content.size()) {
    if (content[i] == '<') {
      std::size_t close = content.find('>', i);
      if (close != std::string::npos) {
        out.push_back(content.substr(i, close - i + 1));
        i = close + 1;
        continue;
      }
    }
    // UTF-8 code point
    unsigned char c = static_cast<unsigned char>(content[i]);
    std::size_t len = 1;
    if ((c & 0xf8) == 0xf0)
      len = 4;
    else if ((c & 0xf0) == 0xe0)
      len = 3;
    else if ((c & 0xe0) == 0xc0)
      len = 2;
    len = std::min(len, content.size() - i);
    out.push_back(content.substr(i, len));
    i += len;
  }
  return out;
}

CellSeq tokenize_cells(const std::vector<std::string>& cells, const StructureSeq& structure,
                       TokenVocab& cell_vocab, const TokenizerOptions& opts) {
  auto positions = structure.cell_positions();
  if (cells.size() != positions.size()) {
    throw std::invalid_argument("cell alignment error: " + std::to_string(cells.size()) +
                                " contents vs " + std::to_string(positions.size()) +
                                " cell-opening tokens");
  }
  CellSeq out;
  out.alignment = positions;
  out.segment_count = cells.size();
  for (std::size_t c = 0; c < cells.size(); ++c) {
    if (c > 0) out.ids.push_back(TokenVocab::kSep);
    auto chars = split_cell_chars(cells[c]);
    if (opts.strip_header_bold && structure.in_header[positions[c]] && chars.size() >= 2 &&
        chars.front() == "<b>" && chars.back() == "</b>") {
      chars.erase(chars.begin());
      chars.pop_back();
    }
    for (const auto& ch : chars) {
      out.ids.push_back(cell_vocab.frozen() ? cell_vocab.id_of(ch) : cell_vocab.intern(ch));
    }
  }
  return out;
}

StructureSeq structure_from_ids(const std::vector<int>& ids, const TokenVocab& vocab) {
  StructureSeq seq;
  seq.ids = ids;
  bool in_attr = false;
  int header_depth = 0;
  for (int id : ids) {
    const std::string& t = vocab.token_of(id);
    bool opens = false;
    if (in_attr) {
      if (t == ">") {
        opens = true;
        in_attr = false;
      }
    } else if (t == "<td") {
      in_attr = true;
    } else if (t == "<td></td>") {
      opens = true;
    } else if (t == "<thead>") {
      ++header_depth;
    }
    seq.in_header.push_back(header_depth > 0);
    if (t == "</thead>" && header_depth > 0) --header_depth;
    seq.opens_cell.push_back(opens);
  }
  return seq;
}

Complexity classify_complexity(const StructureSeq& seq, const TokenVocab& vocab) {
  for (int id : seq.ids) {
    if (has_span_attr(vocab.token_of(id))) return Complexity::Complex;
  }
  return Complexity::Simple;
}

bool detect_header_bold(const std::vector<CorpusSample>& corpus) {
  bool any = false;
  for (const auto& sample : corpus) {
    TokenVocab tmp = TokenVocab::structure_vocab();
    StructureSeq seq = tokenize_structure(sample.structure_tokens, tmp);
    auto positions = seq.cell_positions();
    if (positions.size() != sample.cells.size()) continue;
    for (std::size_t c = 0; c < sample.cells.size(); ++c) {
      if (!seq.in_header[positions[c]] || sample.cells[c].empty()) continue;
      auto chars = split_cell_chars(sample.cells[c]);
      bool bold = chars.size() >= 2 && chars.front() == "<b>" && chars.back() == "</b>";
      if (!bold) return false;
      any = true;
    }
  }
  return any;
}

std::pair<TokenVocab, TokenVocab> build_vocab(const std::vector<CorpusSample>& corpus,
                                              const TokenizerOptions& opts) {
  TokenVocab structure = TokenVocab::structure_vocab();
  TokenVocab cell = TokenVocab::cell_vocab();
  for (const auto& sample : corpus) {
    StructureSeq seq = tokenize_structure(sample.structure_tokens, structure, opts);
    tokenize_cells(sample.cells, seq, cell, opts);
  }
  return {std::move(structure), std::move(cell)};
}

}  // namespace mutab
