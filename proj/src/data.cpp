#include "mutab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "mutab/rng.hpp"

namespace mutab {

using nlohmann::json;

std::vector<TableSample> load_jsonl_dataset(const std::string& path, const std::string& split,
                                            std::size_t min_tokens, DatasetStats* stats) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open dataset: " + path);
  DatasetStats local;
  std::vector<TableSample> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    ++local.lines;
    try {
      json j = json::parse(line);
      TableSample s;
      s.filename = j.at("filename").get<std::string>();
      s.split = j.value("split", "train");
      const json& html = j.at("html");
      s.structure_tokens = html.at("structure").at("tokens").get<std::vector<std::string>>();
      for (const json& cell : html.at("cells")) {
        CellAnnotation c;
        for (const json& tok : cell.at("tokens")) c.content += tok.get<std::string>();
        if (cell.contains("bbox")) {
          auto b = cell.at("bbox").get<std::vector<double>>();
          if (b.size() != 4) throw std::runtime_error("bbox must have 4 entries");
          c.bbox = {b[0], b[1], b[2], b[3]};
        }
        s.cells.push_back(std::move(c));
      }
      if (!split.empty() && s.split != split) {
        ++local.filtered_split;
        continue;
      }
      if (s.structure_tokens.size() < min_tokens) {
        ++local.filtered_short;
        continue;
      }
      ++local.yielded;
      out.push_back(std::move(s));
    } catch (const std::exception&) {
      ++local.skipped_malformed;
    }
  }
  if (stats) *stats = local;
  return out;
}

void save_jsonl_dataset(const std::string& path, const std::vector<TableSample>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write dataset: " + path);
  for (const auto& s : samples) {
    json cells = json::array();
    for (const auto& c : s.cells) {
      json cell;
      cell["tokens"] = split_cell_chars(c.content);
      if (c.bbox) cell["bbox"] = {(*c.bbox)[0], (*c.bbox)[1], (*c.bbox)[2], (*c.bbox)[3]};
      cells.push_back(std::move(cell));
    }
    json j = {{"filename", s.filename},
              {"split", s.split},
              {"html", {{"structure", {{"tokens", s.structure_tokens}}}, {"cells", cells}}}};
    os << j.dump() << '\n';
  }
  if (!os) throw std::runtime_error("dataset write failed: " + path);
}

std::pair<Tensor, ScaleRecord> preprocess_image(const GrayImage& raw, std::size_t target,
                                                bool standardize) {
  if (raw.height == 0 || raw.width == 0) {
    throw std::invalid_argument("preprocess_image: zero-area input");
  }
  ScaleRecord rec;
  rec.target = target;
  std::size_t longer = std::max(raw.height, raw.width);
  rec.scale = static_cast<double>(target) / static_cast<double>(longer);
  rec.resized_h = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(raw.height * rec.scale)));
  rec.resized_w = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(raw.width * rec.scale)));
  if (raw.height >= raw.width)
    rec.resized_h = target;
  else
    rec.resized_w = target;

  Tensor img = Tensor::zeros({1, target, target});
  double inv = 1.0 / rec.scale;
  for (std::size_t y = 0; y < rec.resized_h; ++y) {
    double sy = (static_cast<double>(y) + 0.5) * inv - 0.5;
    sy = std::clamp(sy, 0.0, static_cast<double>(raw.height - 1));
    std::size_t y0 = static_cast<std::size_t>(sy);
    std::size_t y1 = std::min(y0 + 1, raw.height - 1);
    double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < rec.resized_w; ++x) {
      double sx = (static_cast<double>(x) + 0.5) * inv - 0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(raw.width - 1));
      std::size_t x0 = static_cast<std::size_t>(sx);
      std::size_t x1 = std::min(x0 + 1, raw.width - 1);
      double fx = sx - static_cast<double>(x0);
      double top = raw.at(y0, x0) * (1 - fx) + raw.at(y0, x1) * fx;
      double bot = raw.at(y1, x0) * (1 - fx) + raw.at(y1, x1) * fx;
      img.data()[y * target + x] = top * (1 - fy) + bot * fy;
    }
  }
  if (standardize) {
    double mu = 0.0;
    for (double v : img.data()) mu += v;
    mu /= static_cast<double>(img.numel());
    double var = 0.0;
    for (double v : img.data()) var += (v - mu) * (v - mu);
    var /= static_cast<double>(img.numel());
    double inv = 1.0 / std::sqrt(var + 1e-8);
    for (auto& v : img.data()) v = (v - mu) * inv;
  }
  return {std::move(img), rec};
}

NormalizedBoxes normalize_bboxes(const std::vector<CellAnnotation>& cells,
                                 const ScaleRecord& rec) {
  NormalizedBoxes out;
  double denom = static_cast<double>(rec.target);
  for (const auto& cell : cells) {
    if (!cell.bbox || cell.content.empty()) {
      out.boxes.push_back({0, 0, 0, 0});
      out.supervised.push_back(0);
      continue;
    }
    std::array<double, 4> b = *cell.bbox;
    bool clamped = false;
    for (std::size_t i = 0; i < 4; ++i) {
      double v = b[i] * rec.scale / denom;
      if (v < 0.0 || v > 1.0) {
        v = std::clamp(v, 0.0, 1.0);
        clamped = true;
      }
      b[i] = v;
    }
    if (clamped) ++out.clamped;
    out.boxes.push_back(b);
    out.supervised.push_back(1);
  }
  return out;
}

std::array<double, 4> denormalize_bbox(const std::array<double, 4>& box, const ScaleRecord& rec) {
  std::array<double, 4> out;
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = box[i] * static_cast<double>(rec.target) / rec.scale;
  }
  return out;
}

namespace {

constexpr const char* kCharset = "abcdefghijklmnopqrstuvwxyz0123456789";

// 9-bit glyph pattern per charset index; (i * 41) mod 511 is injective over
// the 36-entry charset and never zero after the +1.
unsigned glyph_bits(int charset_index) {
  return static_cast<unsigned>((charset_index * 41) % 511 + 1);
}

struct GridCell {
  int r0, c0, rs, cs;
  std::string content;
  std::array<double, 4> bbox{0, 0, 0, 0};
  bool has_bbox = false;
};

}  // namespace

SyntheticTable generate_synthetic_table(std::uint64_t seed, const SynthSpec& spec) {
  if (spec.rows < 1 || spec.cols < 1) {
    throw std::invalid_argument("synthetic table needs at least one row and column");
  }
  if (spec.merge_prob < 0.0 || spec.merge_prob > 1.0) {
    throw std::invalid_argument("merge probability must lie in [0, 1]");
  }
  Rng rng(seed);
  int rows = spec.rows, cols = spec.cols;
  std::vector<int> owner(static_cast<std::size_t>(rows * cols), -1);
  std::vector<GridCell> cells;

  auto region_free = [&](int r0, int c0, int rs, int cs) {
    for (int r = r0; r < r0 + rs; ++r)
      for (int c = c0; c < c0 + cs; ++c)
        if (owner[static_cast<std::size_t>(r * cols + c)] != -1) return false;
    return true;
  };

  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (owner[static_cast<std::size_t>(r * cols + c)] != -1) continue;
      int rs = 1, cs = 1;
      if (spec.merge_prob > 0.0 && rng.chance(spec.merge_prob)) {
        // bounded retries; an invalid draw falls back to a plain cell
        for (int attempt = 0; attempt < 4; ++attempt) {
          int try_cs = 1, try_rs = 1;
          if (rng.chance(0.5)) {
            int room = std::min(3, cols - c);
            if (room >= 2) try_cs = 2 + rng.below(room - 1);
          } else if (r > 0) {  // header row cells stay within the header
            int room = std::min(3, rows - r);
            if (room >= 2) try_rs = 2 + rng.below(room - 1);
          }
          if ((try_cs > 1 || try_rs > 1) && region_free(r, c, try_rs, try_cs)) {
            rs = try_rs;
            cs = try_cs;
            break;
          }
        }
      }
      int id = static_cast<int>(cells.size());
      for (int rr = r; rr < r + rs; ++rr)
        for (int cc = c; cc < c + cs; ++cc) owner[static_cast<std::size_t>(rr * cols + cc)] = id;
      cells.push_back({r, c, rs, cs, "", {0, 0, 0, 0}, false});
    }
  }

  // geometry
  int s = spec.image_size;
  int margin = 2;
  int cw = (s - 2 * margin) / cols;
  int ch = (s - 2 * margin) / rows;
  if (cw < 5 || ch < 5) {
    throw std::invalid_argument("image too small for the requested grid");
  }

  // contents, respecting each cell's glyph capacity
  for (auto& cell : cells) {
    int w = cell.cs * cw, h = cell.rs * ch;
    int per_row = std::max(0, (w - 4) / 4);
    int glyph_rows = std::max(0, (h - 4) / 4);
    int capacity = per_row * glyph_rows;
    if (capacity == 0 || rng.chance(spec.empty_cell_prob)) continue;
    int len = 1 + rng.below(std::min(4, capacity));
    for (int k = 0; k < len; ++k) cell.content += kCharset[rng.below(36)];
  }

  // render: borders at 0.5, glyphs at 1.0, background 0
  GrayImage img;
  img.height = img.width = static_cast<std::size_t>(s);
  img.pixels.assign(static_cast<std::size_t>(s) * s, 0.0);
  auto put = [&](int y, int x, double v) {
    if (y >= 0 && y < s && x >= 0 && x < s) {
      img.pixels[static_cast<std::size_t>(y) * s + x] = v;
    }
  };
  for (auto& cell : cells) {
    int x0 = margin + cell.c0 * cw, y0 = margin + cell.r0 * ch;
    int x1 = x0 + cell.cs * cw, y1 = y0 + cell.rs * ch;
    for (int x = x0; x <= x1; ++x) {
      put(y0, x, 0.5);
      put(y1, x, 0.5);
    }
    for (int y = y0; y <= y1; ++y) {
      put(y, x0, 0.5);
      put(y, x1, 0.5);
    }
    if (cell.content.empty()) continue;
    int per_row = std::max(1, (cell.cs * cw - 4) / 4);
    double gx0 = 1e18, gy0 = 1e18, gx1 = -1e18, gy1 = -1e18;
    for (std::size_t k = 0; k < cell.content.size(); ++k) {
      int gx = x0 + 2 + static_cast<int>(k % static_cast<std::size_t>(per_row)) * 4;
      int gy = y0 + 2 + static_cast<int>(k / static_cast<std::size_t>(per_row)) * 4;
      int idx = static_cast<int>(std::string(kCharset).find(cell.content[k]));
      unsigned bits = glyph_bits(idx);
      for (int b = 0; b < 9; ++b) {
        if (bits & (1u << b)) put(gy + b / 3, gx + b % 3, 1.0);
      }
      gx0 = std::min(gx0, static_cast<double>(gx));
      gy0 = std::min(gy0, static_cast<double>(gy));
      gx1 = std::max(gx1, static_cast<double>(gx + 3));
      gy1 = std::max(gy1, static_cast<double>(gy + 3));
    }
    cell.bbox = {gx0, gy0, gx1, gy1};
    cell.has_bbox = true;
  }

  // tokens: first row is the header, remaining rows the body
  SyntheticTable out;
  auto& tokens = out.sample.structure_tokens;
  auto emit_row = [&](int r) {
    tokens.push_back("<tr>");
    for (int c = 0; c < cols; ++c) {
      int id = owner[static_cast<std::size_t>(r * cols + c)];
      const GridCell& cell = cells[static_cast<std::size_t>(id)];
      if (cell.r0 != r || cell.c0 != c) continue;  // covered by a merge
      if (cell.rs == 1 && cell.cs == 1) {
        tokens.push_back("<td>");
        tokens.push_back("</td>");
      } else {
        tokens.push_back("<td");
        if (cell.cs > 1) tokens.push_back(" colspan=\"" + std::to_string(cell.cs) + "\"");
        if (cell.rs > 1) tokens.push_back(" rowspan=\"" + std::to_string(cell.rs) + "\"");
        tokens.push_back(">");
        tokens.push_back("</td>");
        out.complex = true;
      }
    }
    tokens.push_back("</tr>");
  };
  tokens.push_back("<thead>");
  emit_row(0);
  tokens.push_back("</thead>");
  tokens.push_back("<tbody>");
  for (int r = 1; r < rows; ++r) emit_row(r);
  tokens.push_back("</tbody>");

  for (const auto& cell : cells) {
    CellAnnotation ann;
    ann.content = cell.content;
    if (cell.has_bbox) ann.bbox = cell.bbox;
    out.sample.cells.push_back(std::move(ann));
  }
  out.sample.image = std::move(img);
  out.expected_tree_nodes = 3 + static_cast<std::size_t>(rows) + cells.size();
  return out;
}

Batch collate(const std::vector<TableSample>& samples, TokenVocab& structure_vocab,
              TokenVocab& cell_vocab, const ModelConfig& cfg, const TokenizerOptions& opts) {
  Batch batch;
  for (const auto& sample : samples) {
    StructureSeq seq = tokenize_structure(sample.structure_tokens, structure_vocab, opts);
    std::vector<std::string> contents;
    contents.reserve(sample.cells.size());
    for (const auto& c : sample.cells) contents.push_back(c.content);
    CellSeq cs = tokenize_cells(contents, seq, cell_vocab, opts);

    std::size_t structure_len = seq.ids.size() + 2;  // with SOS and EOS
    std::size_t cell_len = cs.ids.size() + 2;
    if (structure_len > static_cast<std::size_t>(cfg.max_structure_len) ||
        cell_len > static_cast<std::size_t>(cfg.max_cell_len)) {
      ++batch.skipped_overlength;
      continue;
    }

    BatchItem item;
    item.filename = sample.filename;
    item.structure = seq;
    item.complex = classify_complexity(seq, structure_vocab) == Complexity::Complex;
    auto [img, rec] = preprocess_image(sample.image, static_cast<std::size_t>(cfg.image_size),
                                       cfg.standardize_images);
    item.image = std::move(img);
    item.scale = rec;

    item.ltor_input.push_back(TokenVocab::kSos);
    item.ltor_input.insert(item.ltor_input.end(), seq.ids.begin(), seq.ids.end());
    item.ltor_target = seq.ids;
    item.ltor_target.push_back(TokenVocab::kEos);

    std::vector<int> reversed(seq.ids.rbegin(), seq.ids.rend());
    item.rtol_input.push_back(TokenVocab::kSos);
    item.rtol_input.insert(item.rtol_input.end(), reversed.begin(), reversed.end());
    item.rtol_target = reversed;
    item.rtol_target.push_back(TokenVocab::kEos);

    item.cell_input.push_back(TokenVocab::kSos);
    item.cell_input.insert(item.cell_input.end(), cs.ids.begin(), cs.ids.end());
    item.cell_target = cs.ids;
    item.cell_target.push_back(TokenVocab::kEos);

    for (std::size_t p : cs.alignment) item.cell_positions.push_back(static_cast<int>(p) + 1);

    NormalizedBoxes boxes = normalize_bboxes(sample.cells, rec);
    item.bbox_targets = Tensor::zeros({item.ltor_target.size(), 4});
    item.bbox_mask.assign(item.ltor_target.size(), 0);
    auto cell_pos_raw = seq.cell_positions();
    for (std::size_t c = 0; c < cell_pos_raw.size(); ++c) {
      if (!boxes.supervised[c]) continue;
      std::size_t row = cell_pos_raw[c];  // target coordinate of the opening token
      for (std::size_t k = 0; k < 4; ++k) {
        item.bbox_targets.data()[row * 4 + k] = boxes.boxes[c][k];
      }
      item.bbox_mask[row] = 1;
    }

    batch.items.push_back(std::move(item));
  }

  for (const auto& item : batch.items) {
    batch.structure_width = std::max(batch.structure_width, item.ltor_target.size());
    batch.cell_width = std::max(batch.cell_width, item.cell_target.size());
  }

  for (auto& item : batch.items) {
    auto pad_to = [](std::vector<int>& v, std::size_t width) {
      v.resize(width, TokenVocab::kPad);
    };
    pad_to(item.ltor_input, batch.structure_width);
    pad_to(item.ltor_target, batch.structure_width);
    pad_to(item.rtol_input, batch.structure_width);
    pad_to(item.rtol_target, batch.structure_width);
    pad_to(item.cell_input, batch.cell_width);
    pad_to(item.cell_target, batch.cell_width);
    item.target_mask.assign(batch.structure_width, 0);
    for (std::size_t i = 0; i < batch.structure_width; ++i) {
      item.target_mask[i] = item.ltor_target[i] != TokenVocab::kPad;
    }
    item.cell_mask.assign(batch.cell_width, 0);
    for (std::size_t i = 0; i < batch.cell_width; ++i) {
      item.cell_mask[i] = item.cell_target[i] != TokenVocab::kPad;
    }
    if (!item.cell_positions.empty()) {
      item.inject_rows = cell_inject_rows(item.cell_input, item.cell_positions);
    } else {
      item.inject_rows.assign(item.cell_input.size(), 0);
    }
    item.bbox_mask.resize(batch.structure_width, 0);
    if (item.bbox_targets.size(0) < batch.structure_width) {
      Tensor padded = Tensor::zeros({batch.structure_width, 4});
      std::copy(item.bbox_targets.data().begin(), item.bbox_targets.data().end(),
                padded.data().begin());
      item.bbox_targets = padded;
    }
  }
  return batch;
}

}  // namespace mutab
