#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mutab/data.hpp"
#include "mutab/png_io.hpp"

using namespace mutab;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / name; }

std::string sample_line(const std::string& filename, const std::string& split, int token_count) {
  std::string tokens;
  tokens += "\"<tr>\",\"<td>\",\"</td>\",\"</tr>\"";
  for (int i = 4; i < token_count; i += 4) tokens += ",\"<tr>\",\"<td>\",\"</td>\",\"</tr>\"";
  return "{\"filename\":\"" + filename + "\",\"split\":\"" + split +
         "\",\"html\":{\"structure\":{\"tokens\":[" + tokens +
         "]},\"cells\":[{\"tokens\":[\"a\"],\"bbox\":[1,2,3,4]}]}}";
}

}  // namespace

TEST_CASE("jsonl loader: empty file, split filter, malformed lines") {
  fs::path p = temp_file("mutab_data_empty.jsonl");
  {
    std::ofstream os(p);
  }
  CHECK(load_jsonl_dataset(p.string(), "train").empty());

  {
    std::ofstream os(p);
    os << sample_line("a.png", "train", 4) << "\n";
    os << sample_line("b.png", "train", 4) << "\n";
    os << sample_line("c.png", "val", 4) << "\n";
    os << "{not json}\n";
  }
  DatasetStats stats;
  auto val = load_jsonl_dataset(p.string(), "val", 0, &stats);
  REQUIRE(val.size() == 1);
  CHECK(val[0].filename == "c.png");
  CHECK(val[0].cells.size() == 1);
  CHECK(val[0].cells[0].content == "a");
  REQUIRE(val[0].cells[0].bbox.has_value());
  CHECK((*val[0].cells[0].bbox)[2] == 3.0);
  CHECK(stats.skipped_malformed == 1);
  CHECK(stats.filtered_split == 2);
  fs::remove(p);
}

TEST_CASE("jsonl loader: min-token filter with independent recount") {
  fs::path p = temp_file("mutab_data_min.jsonl");
  {
    std::ofstream os(p);
    os << sample_line("short.png", "train", 4) << "\n";
    os << sample_line("long.png", "train", 16) << "\n";
    os << sample_line("longer.png", "train", 24) << "\n";
  }
  auto kept = load_jsonl_dataset(p.string(), "train", 16);
  REQUIRE(kept.size() == 2);
  for (const auto& s : kept) CHECK(s.structure_tokens.size() >= 16);  // recount
  fs::remove(p);
}

TEST_CASE("jsonl round trip") {
  SyntheticTable t = generate_synthetic_table(3, {2, 3, 0.4, 64, 0.2});
  t.sample.filename = "x.png";
  fs::path p = temp_file("mutab_data_rt.jsonl");
  save_jsonl_dataset(p.string(), {t.sample});
  auto back = load_jsonl_dataset(p.string(), "train");
  REQUIRE(back.size() == 1);
  CHECK(back[0].structure_tokens == t.sample.structure_tokens);
  REQUIRE(back[0].cells.size() == t.sample.cells.size());
  for (std::size_t i = 0; i < back[0].cells.size(); ++i) {
    CHECK(back[0].cells[i].content == t.sample.cells[i].content);
    CHECK(back[0].cells[i].bbox.has_value() == t.sample.cells[i].bbox.has_value());
  }
  fs::remove(p);
}

TEST_CASE("png round trip within quantization") {
  GrayImage img;
  img.height = 5;
  img.width = 7;
  img.pixels.resize(35);
  for (std::size_t i = 0; i < 35; ++i) img.pixels[i] = static_cast<double>(i) / 34.0;
  fs::path p = temp_file("mutab_png_rt.png");
  write_png_gray(p.string(), img);
  GrayImage back = read_png_gray(p.string());
  REQUIRE(back.height == 5);
  REQUIRE(back.width == 7);
  for (std::size_t i = 0; i < 35; ++i) {
    CHECK(std::fabs(back.pixels[i] - img.pixels[i]) <= 0.5 / 255.0 + 1e-12);
  }
  fs::remove(p);
}

TEST_CASE("preprocess: square input is identity up to value copy") {
  GrayImage img;
  img.height = img.width = 8;
  img.pixels.resize(64);
  for (std::size_t i = 0; i < 64; ++i) img.pixels[i] = (i % 7) / 7.0;
  auto [tensor, rec] = preprocess_image(img, 8);
  CHECK(rec.scale == 1.0);
  CHECK(rec.resized_h == 8);
  CHECK(rec.resized_w == 8);
  for (std::size_t i = 0; i < 64; ++i) CHECK(tensor.data()[i] == doctest::Approx(img.pixels[i]));
}

TEST_CASE("preprocess: wide input scales and pads bottom") {
  GrayImage img;
  img.height = 8;
  img.width = 16;
  img.pixels.assign(128, 1.0);
  auto [tensor, rec] = preprocess_image(img, 8);
  CHECK(rec.scale == doctest::Approx(0.5));
  CHECK(rec.resized_w == 8);
  CHECK(rec.resized_h == 4);
  // padded region is zero
  for (std::size_t y = 4; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) CHECK(tensor.data()[y * 8 + x] == 0.0);
  for (std::size_t x = 0; x < 8; ++x) CHECK(tensor.data()[x] == doctest::Approx(1.0));

  GrayImage empty;
  CHECK_THROWS_AS(preprocess_image(empty, 8), std::invalid_argument);
}

TEST_CASE("preprocess standardization gives zero mean, unit variance") {
  SyntheticTable t = generate_synthetic_table(21, {3, 3, 0.2, 64, 0.1});
  auto [img, rec] = preprocess_image(t.sample.image, 64, true);
  double mu = 0;
  for (double v : img.data()) mu += v;
  mu /= static_cast<double>(img.numel());
  double var = 0;
  for (double v : img.data()) var += (v - mu) * (v - mu);
  var /= static_cast<double>(img.numel());
  CHECK(std::fabs(mu) < 1e-12);
  CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("bbox normalization and round trip") {
  std::vector<CellAnnotation> cells;
  cells.push_back({"x", std::array<double, 4>{0, 0, 32, 32}});  // full image
  cells.push_back({"", std::nullopt});                          // empty cell
  cells.push_back({"y", std::array<double, 4>{8, 4, 16, 12}});
  GrayImage img;
  img.height = img.width = 32;
  img.pixels.assign(32 * 32, 0.0);
  auto [tensor, rec] = preprocess_image(img, 16);

  NormalizedBoxes nb = normalize_bboxes(cells, rec);
  REQUIRE(nb.boxes.size() == 3);
  CHECK(nb.supervised == std::vector<std::uint8_t>{1, 0, 1});
  CHECK(nb.boxes[0][0] == 0.0);
  CHECK(nb.boxes[0][2] == doctest::Approx(1.0));
  CHECK(nb.boxes[0][3] == doctest::Approx(1.0));

  auto back = denormalize_bbox(nb.boxes[2], rec);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::fabs(back[i] - (*cells[2].bbox)[i]) <= 1.0);  // within a pixel
  }

  std::vector<CellAnnotation> outside;
  outside.push_back({"z", std::array<double, 4>{-5, 0, 40, 32}});
  NormalizedBoxes clamped = normalize_bboxes(outside, rec);
  CHECK(clamped.clamped == 1);
  CHECK(clamped.boxes[0][0] == 0.0);
  CHECK(clamped.boxes[0][2] == 1.0);
}

TEST_CASE("generator: minimal table") {
  SyntheticTable t = generate_synthetic_table(7, {1, 1, 0.0, 64, 0.0});
  std::vector<std::string> expected_prefix = {"<thead>", "<tr>", "<td>", "</td>",
                                              "</tr>", "</thead>", "<tbody>", "</tbody>"};
  CHECK(t.sample.structure_tokens == expected_prefix);
  REQUIRE(t.sample.cells.size() == 1);
  CHECK_FALSE(t.sample.cells[0].content.empty());
  CHECK(t.sample.cells[0].bbox.has_value());
  CHECK(t.expected_tree_nodes == 3 + 1 + 1);
  CHECK_FALSE(t.complex);
}

TEST_CASE("generator: merge_prob zero keeps every table simple") {
  TokenVocab v = TokenVocab::structure_vocab();
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    SyntheticTable t = generate_synthetic_table(seed, {3, 4, 0.0, 64, 0.1});
    CHECK_FALSE(t.complex);
    StructureSeq seq = tokenize_structure(t.sample.structure_tokens, v);
    CHECK(classify_complexity(seq, v) == Complexity::Simple);
  }
}

TEST_CASE("generator is deterministic under the seed") {
  for (std::uint64_t seed : {1ull, 42ull, 977ull}) {
    SyntheticTable a = generate_synthetic_table(seed, {4, 4, 0.3, 64, 0.1});
    SyntheticTable b = generate_synthetic_table(seed, {4, 4, 0.3, 64, 0.1});
    CHECK(a.sample.structure_tokens == b.sample.structure_tokens);
    REQUIRE(a.sample.cells.size() == b.sample.cells.size());
    for (std::size_t i = 0; i < a.sample.cells.size(); ++i) {
      CHECK(a.sample.cells[i].content == b.sample.cells[i].content);
    }
    CHECK(a.sample.image.pixels == b.sample.image.pixels);  // byte identical
  }
}

TEST_CASE("generator invariants over a seed sweep") {
  TokenVocab sv = TokenVocab::structure_vocab();
  TokenVocab cv = TokenVocab::cell_vocab();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    SyntheticTable t = generate_synthetic_table(seed, {2 + (int)(seed % 3), 2 + (int)(seed % 4),
                                                       0.35, 64, 0.1});
    StructureSeq seq = tokenize_structure(t.sample.structure_tokens, sv);
    // alignment: one content per opening token
    CHECK(seq.cell_count() == t.sample.cells.size());
    // tokenizer round trip
    StructureSeq again = tokenize_structure(t.sample.structure_tokens, sv);
    CHECK(detokenize_structure(seq, sv) == detokenize_structure(again, sv));
    // bbox containment: glyphs live inside the image and inside the bbox
    for (const auto& cell : t.sample.cells) {
      if (!cell.bbox) {
        CHECK(cell.content.empty());
        continue;
      }
      const auto& b = *cell.bbox;
      CHECK(b[0] < b[2]);
      CHECK(b[1] < b[3]);
      CHECK(b[0] >= 0);
      CHECK(b[2] <= 64);
      CHECK(b[3] <= 64);
      // every glyph pixel of this cell is lit inside the bbox
      bool any_lit = false;
      for (int y = (int)b[1]; y < (int)b[3]; ++y)
        for (int x = (int)b[0]; x < (int)b[2]; ++x)
          any_lit = any_lit || t.sample.image.at((std::size_t)y, (std::size_t)x) == 1.0;
      CHECK(any_lit);
    }
    // no glyph outside any bbox: every 1.0 pixel lies in some cell bbox
    for (std::size_t y = 0; y < 64; ++y) {
      for (std::size_t x = 0; x < 64; ++x) {
        if (t.sample.image.at(y, x) != 1.0) continue;
        bool inside = false;
        for (const auto& cell : t.sample.cells) {
          if (!cell.bbox) continue;
          const auto& b = *cell.bbox;
          double fx = static_cast<double>(x) + 0.5, fy = static_cast<double>(y) + 0.5;
          inside = inside || (fx >= b[0] && fx <= b[2] && fy >= b[1] && fy <= b[3]);
        }
        CHECK(inside);
      }
    }
    CellSeq cs = tokenize_cells(
        [&] {
          std::vector<std::string> c;
          for (const auto& cell : t.sample.cells) c.push_back(cell.content);
          return c;
        }(),
        seq, cv);
    CHECK(cs.segment_count == t.sample.cells.size());
  }
}

TEST_CASE("collate: single sample has no padding beyond the wrappers") {
  SyntheticTable t = generate_synthetic_table(5, {2, 2, 0.0, 64, 0.0});
  t.sample.filename = "one.png";
  auto [sv, cv] = build_vocab({{t.sample.structure_tokens,
                                [&] {
                                  std::vector<std::string> c;
                                  for (const auto& cell : t.sample.cells) c.push_back(cell.content);
                                  return c;
                                }()}});
  ModelConfig cfg = ModelConfig::preset("tiny");
  cfg.structure_vocab = static_cast<int>(sv.size());
  cfg.cell_vocab = static_cast<int>(cv.size());

  Batch b = collate({t.sample}, sv, cv, cfg);
  REQUIRE(b.items.size() == 1);
  const BatchItem& item = b.items[0];
  CHECK(item.ltor_input.front() == TokenVocab::kSos);
  CHECK(item.ltor_target.back() == TokenVocab::kEos);
  for (int id : item.ltor_target) CHECK(id != TokenVocab::kPad);
  CHECK(item.ltor_input.size() == item.ltor_target.size());
  CHECK(item.image.shape() == Shape{1, 64, 64});
  CHECK(item.cell_positions.size() == 4);
  CHECK(item.inject_rows.size() == item.cell_input.size());
}

TEST_CASE("collate: two samples pad to the longer one") {
  SyntheticTable small = generate_synthetic_table(6, {1, 1, 0.0, 64, 0.0});
  small.sample.filename = "small.png";
  SyntheticTable big = generate_synthetic_table(7, {3, 3, 0.0, 64, 0.0});
  big.sample.filename = "big.png";

  std::vector<CorpusSample> corpus;
  for (const auto* t : {&small, &big}) {
    CorpusSample c;
    c.structure_tokens = t->sample.structure_tokens;
    for (const auto& cell : t->sample.cells) c.cells.push_back(cell.content);
    corpus.push_back(c);
  }
  auto [sv, cv] = build_vocab(corpus);
  ModelConfig cfg = ModelConfig::preset("tiny");
  cfg.structure_vocab = static_cast<int>(sv.size());
  cfg.cell_vocab = static_cast<int>(cv.size());

  Batch b = collate({small.sample, big.sample}, sv, cv, cfg);
  REQUIRE(b.items.size() == 2);
  CHECK(b.items[0].ltor_target.size() == b.structure_width);
  CHECK(b.items[1].ltor_target.size() == b.structure_width);
  std::size_t mask0 = 0, mask1 = 0;
  for (auto m : b.items[0].target_mask) mask0 += m;
  for (auto m : b.items[1].target_mask) mask1 += m;
  // a 1x1 table has one merged pair (-1 token) and gains EOS (+1)
  CHECK(mask0 == small.sample.structure_tokens.size());
  CHECK(mask1 > mask0);
  CHECK(b.items[1].target_mask.back() == 1);  // longest sample has no padding

  // mirrored targets equal the independent reversal of the real span
  for (const auto& item : b.items) {
    std::size_t n = 0;
    while (n < item.ltor_target.size() && item.ltor_target[n] != TokenVocab::kEos) ++n;
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(item.rtol_target[i] == item.ltor_target[n - 1 - i]);
    }
    CHECK(item.rtol_target[n] == TokenVocab::kEos);
  }
}

TEST_CASE("collate: overlength samples are skipped with a count") {
  SyntheticTable big = generate_synthetic_table(8, {4, 4, 0.0, 64, 0.0});
  big.sample.filename = "big.png";
  std::vector<CorpusSample> corpus(1);
  corpus[0].structure_tokens = big.sample.structure_tokens;
  for (const auto& cell : big.sample.cells) corpus[0].cells.push_back(cell.content);
  auto [sv, cv] = build_vocab(corpus);
  ModelConfig cfg = ModelConfig::preset("tiny");
  cfg.structure_vocab = static_cast<int>(sv.size());
  cfg.cell_vocab = static_cast<int>(cv.size());
  cfg.max_structure_len = 8;  // too small for a 4x4 table

  Batch b = collate({big.sample}, sv, cv, cfg);
  CHECK(b.items.empty());
  CHECK(b.skipped_overlength == 1);
}

TEST_CASE("collate: bbox supervision sits at cell-opening target rows") {
  SyntheticTable t = generate_synthetic_table(9, {2, 2, 0.0, 64, 0.0});
  t.sample.filename = "t.png";
  std::vector<CorpusSample> corpus(1);
  corpus[0].structure_tokens = t.sample.structure_tokens;
  for (const auto& cell : t.sample.cells) corpus[0].cells.push_back(cell.content);
  auto [sv, cv] = build_vocab(corpus);
  ModelConfig cfg = ModelConfig::preset("tiny");
  cfg.structure_vocab = static_cast<int>(sv.size());
  cfg.cell_vocab = static_cast<int>(cv.size());

  Batch b = collate({t.sample}, sv, cv, cfg);
  REQUIRE(b.items.size() == 1);
  const BatchItem& item = b.items[0];
  auto positions = item.structure.cell_positions();
  std::size_t supervised = 0;
  for (std::size_t i = 0; i < item.bbox_mask.size(); ++i) {
    if (!item.bbox_mask[i]) continue;
    ++supervised;
    CHECK(std::find(positions.begin(), positions.end(), i) != positions.end());
    // normalized targets are inside the unit square
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(item.bbox_targets.at(i, k) >= 0.0);
      CHECK(item.bbox_targets.at(i, k) <= 1.0);
    }
  }
  std::size_t with_box = 0;
  for (const auto& c : t.sample.cells) with_box += c.bbox.has_value() ? 1 : 0;
  CHECK(supervised == with_box);
}
