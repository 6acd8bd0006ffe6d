#include "mutab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

namespace mutab {

namespace fs = std::filesystem;

void ModelConfig::validate() const {
  if (channels <= 0 || channels % heads != 0) {
    throw std::invalid_argument("model config: channels must be divisible by heads");
  }
  if (channels % 4 != 0) {
    throw std::invalid_argument("model config: channels must be divisible by 4");
  }
  if (html_window < 1 || cell_window < 1) {
    throw std::invalid_argument("model config: attention windows must be >= 1");
  }
  if (max_structure_len < 2 || max_cell_len < 2) {
    throw std::invalid_argument("model config: sequence caps must be >= 2");
  }
  if (image_size <= 0 || image_size % 8 != 0) {
    throw std::invalid_argument("model config: image size must be a positive multiple of 8");
  }
  if (html_blocks < 1 || cell_blocks < 1) {
    throw std::invalid_argument("model config: at least one attention block per decoder");
  }
  if (backbone != "tiny" && backbone != "full") {
    throw std::invalid_argument("model config: unknown backbone preset '" + backbone + "'");
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw std::invalid_argument("model config: dropout must be in [0, 1)");
  }
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig cfg;
  if (name == "full") {
    return cfg;
  }
  if (name == "tiny") {
    cfg.image_size = 64;
    cfg.channels = 64;
    cfg.heads = 4;
    cfg.gca_bottleneck = 16;
    cfg.backbone = "tiny";
    return cfg;
  }
  throw std::invalid_argument("unknown preset '" + name + "' (expected tiny or full)");
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
  std::map<std::string, std::string> kv;
  kv["image_size"] = std::to_string(image_size);
  kv["channels"] = std::to_string(channels);
  kv["heads"] = std::to_string(heads);
  kv["html_blocks"] = std::to_string(html_blocks);
  kv["cell_blocks"] = std::to_string(cell_blocks);
  kv["html_window"] = std::to_string(html_window);
  kv["cell_window"] = std::to_string(cell_window);
  kv["max_structure_len"] = std::to_string(max_structure_len);
  kv["max_cell_len"] = std::to_string(max_cell_len);
  kv["ffn_mult"] = std::to_string(ffn_mult);
  kv["gca_bottleneck"] = std::to_string(gca_bottleneck);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", dropout);
  kv["dropout"] = buf;
  kv["prenorm"] = prenorm ? "true" : "false";
  kv["standardize_images"] = standardize_images ? "true" : "false";
  kv["backbone"] = backbone;
  kv["structure_vocab"] = std::to_string(structure_vocab);
  kv["cell_vocab"] = std::to_string(cell_vocab);
  kv["seed"] = std::to_string(seed);
  return kv;
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig cfg;
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument(std::string("model config missing key ") + key);
    return it->second;
  };
  cfg.image_size = std::stoi(get("image_size"));
  cfg.channels = std::stoi(get("channels"));
  cfg.heads = std::stoi(get("heads"));
  cfg.html_blocks = std::stoi(get("html_blocks"));
  cfg.cell_blocks = std::stoi(get("cell_blocks"));
  cfg.html_window = std::stoi(get("html_window"));
  cfg.cell_window = std::stoi(get("cell_window"));
  cfg.max_structure_len = std::stoi(get("max_structure_len"));
  cfg.max_cell_len = std::stoi(get("max_cell_len"));
  cfg.ffn_mult = std::stoi(get("ffn_mult"));
  cfg.gca_bottleneck = std::stoi(get("gca_bottleneck"));
  cfg.dropout = std::stod(get("dropout"));
  cfg.prenorm = get("prenorm") == "true";
  {
    auto it = kv.find("standardize_images");
    cfg.standardize_images = it != kv.end() && it->second == "true";
  }
  cfg.backbone = get("backbone");
  cfg.structure_vocab = std::stoi(get("structure_vocab"));
  cfg.cell_vocab = std::stoi(get("cell_vocab"));
  cfg.seed = std::stoull(get("seed"));
  return cfg;
}

ConvLayer ConvLayer::create(std::size_t cin, std::size_t cout, std::size_t k, int stride, int pad,
                            bool relu_after, Rng& rng) {
  ConvLayer c;
  c.w = xavier_init({cout, cin, k, k}, rng);
  c.b = Tensor::zeros({cout});
  c.stride = stride;
  c.pad = pad;
  c.relu_after = relu_after;
  return c;
}

Tensor ConvLayer::forward(const Tensor& x) const {
  Tensor y = conv2d(x, w, b, stride, pad);
  return relu_after ? relu(y) : y;
}

ResidualBlock ResidualBlock::create(std::size_t channels, Rng& rng) {
  ResidualBlock r;
  r.c1 = ConvLayer::create(channels, channels, 3, 1, 1, true, rng);
  r.c2 = ConvLayer::create(channels, channels, 3, 1, 1, false, rng);
  return r;
}

Tensor ResidualBlock::forward(const Tensor& x) const {
  return relu(add(x, c2.forward(c1.forward(x))));
}

Tensor Backbone::forward(const Tensor& x) const {
  Tensor h = x;
  for (const auto& item : items) {
    h = std::visit([&](const auto& layer) { return layer.forward(h); }, item);
  }
  return h;
}

void Backbone::register_params(ParamRegistry& reg, const std::string& prefix) {
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::string p = prefix + ".l" + std::to_string(i);
    std::visit(
        [&](auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, ConvLayer>) {
            reg.add(p + ".w", layer.w);
            reg.add(p + ".b", layer.b);
          } else if constexpr (std::is_same_v<T, ResidualBlock>) {
            reg.add(p + ".c1.w", layer.c1.w);
            reg.add(p + ".c1.b", layer.c1.b);
            reg.add(p + ".c2.w", layer.c2.w);
            reg.add(p + ".c2.b", layer.c2.b);
          } else {
            layer.register_params(reg, p + ".gca");
          }
        },
        items[i]);
  }
}

std::size_t Backbone::conv_layers() const {
  std::size_t n = 0;
  for (const auto& item : items) {
    if (std::holds_alternative<ConvLayer>(item)) n += 1;
    if (std::holds_alternative<ResidualBlock>(item)) n += 2;
  }
  return n;
}

std::size_t Backbone::gca_blocks() const {
  std::size_t n = 0;
  for (const auto& item : items) n += std::holds_alternative<GcaBlock>(item) ? 1 : 0;
  return n;
}

Backbone build_backbone(const ModelConfig& cfg, Rng& rng) {
  Backbone bb;
  std::size_t d = static_cast<std::size_t>(cfg.channels);
  std::size_t bn = static_cast<std::size_t>(cfg.bottleneck());
  if (cfg.backbone == "tiny") {
    // 4 residual blocks, 3 global-context blocks, downsample x8
    std::size_t c1 = std::max<std::size_t>(4, d / 8);
    std::size_t c2 = std::max<std::size_t>(8, d / 4);
    std::size_t c3 = std::max<std::size_t>(16, d / 2);
    bb.items.push_back(ConvLayer::create(1, c1, 3, 2, 1, true, rng));
    bb.items.push_back(ResidualBlock::create(c1, rng));
    bb.items.push_back(ConvLayer::create(c1, c2, 3, 2, 1, true, rng));
    bb.items.push_back(ResidualBlock::create(c2, rng));
    bb.items.push_back(GcaBlock::create(c2, std::max<std::size_t>(4, bn / 2), rng));
    bb.items.push_back(ConvLayer::create(c2, c3, 3, 2, 1, true, rng));
    bb.items.push_back(ResidualBlock::create(c3, rng));
    bb.items.push_back(GcaBlock::create(c3, bn, rng));
    bb.items.push_back(ResidualBlock::create(c3, rng));
    bb.items.push_back(GcaBlock::create(c3, bn, rng));
    bb.items.push_back(ConvLayer::create(c3, d, 1, 1, 0, false, rng));
    return bb;
  }
  // full: 26 convolutions, stride-2 stem plus two stride-2 stage entries
  std::size_t c1 = d / 8, c2 = d / 4, c3 = d / 2;
  bb.items.push_back(ConvLayer::create(1, c1, 3, 2, 1, true, rng));
  for (int i = 0; i < 2; ++i) bb.items.push_back(ResidualBlock::create(c1, rng));
  bb.items.push_back(ConvLayer::create(c1, c2, 3, 2, 1, true, rng));
  for (int i = 0; i < 3; ++i) bb.items.push_back(ResidualBlock::create(c2, rng));
  bb.items.push_back(GcaBlock::create(c2, bn, rng));
  bb.items.push_back(ConvLayer::create(c2, c3, 3, 2, 1, true, rng));
  for (int i = 0; i < 3; ++i) bb.items.push_back(ResidualBlock::create(c3, rng));
  bb.items.push_back(GcaBlock::create(c3, bn, rng));
  bb.items.push_back(ConvLayer::create(c3, d, 3, 1, 1, true, rng));
  for (int i = 0; i < 3; ++i) bb.items.push_back(ResidualBlock::create(d, rng));
  bb.items.push_back(GcaBlock::create(d, bn, rng));
  return bb;
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  if (cfg_.structure_vocab < 4) {
    throw std::invalid_argument("model: structure vocab must include at least one real token");
  }
  if (cfg_.cell_vocab < 5) {
    throw std::invalid_argument("model: cell vocab must include at least one real token");
  }
  Rng rng(cfg_.seed);
  std::size_t d = static_cast<std::size_t>(cfg_.channels);
  std::size_t ffn = d * static_cast<std::size_t>(cfg_.ffn_mult);

  backbone_ = build_backbone(cfg_, rng);

  html_.embedding_table = xavier_init({static_cast<std::size_t>(cfg_.structure_vocab), d}, rng);
  html_.direction_table = xavier_init({2, d}, rng);
  for (int i = 0; i < cfg_.html_blocks; ++i) {
    html_.blocks.push_back(AttentionBlock::create(d, static_cast<std::size_t>(cfg_.heads), ffn, rng));
    html_.blocks.back().dropout_rate = cfg_.dropout;
  }
  html_.final_ln = LayerNormParams::create(d);
  html_.token_head = Linear::create(d, static_cast<std::size_t>(cfg_.structure_vocab), rng);
  html_.bbox_head = Linear::create(d, 4, rng);

  cell_.embedding_table = xavier_init({static_cast<std::size_t>(cfg_.cell_vocab), d}, rng);
  for (int i = 0; i < cfg_.cell_blocks; ++i) {
    cell_.blocks.push_back(AttentionBlock::create(d, static_cast<std::size_t>(cfg_.heads), ffn, rng));
    cell_.blocks.back().dropout_rate = cfg_.dropout;
  }
  cell_.final_ln = LayerNormParams::create(d);
  cell_.head = Linear::create(d, static_cast<std::size_t>(cfg_.cell_vocab), rng);

  backbone_.register_params(params_, "encoder");
  params_.add("html.embedding", html_.embedding_table);
  params_.add("html.direction", html_.direction_table);
  for (std::size_t i = 0; i < html_.blocks.size(); ++i) {
    html_.blocks[i].register_params(params_, "html.block" + std::to_string(i));
  }
  html_.final_ln.register_params(params_, "html.final_ln");
  html_.token_head.register_params(params_, "html.token_head");
  html_.bbox_head.register_params(params_, "html.bbox_head");
  params_.add("cell.embedding", cell_.embedding_table);
  for (std::size_t i = 0; i < cell_.blocks.size(); ++i) {
    cell_.blocks[i].register_params(params_, "cell.block" + std::to_string(i));
  }
  cell_.final_ln.register_params(params_, "cell.final_ln");
  cell_.head.register_params(params_, "cell.head");
}

EncoderOutput Model::encode_image(const Tensor& img, Rng*) const {
  std::size_t s = static_cast<std::size_t>(cfg_.image_size);
  if (img.rank() != 3 || img.size(0) != 1 || img.size(1) != s || img.size(2) != s) {
    throw std::invalid_argument("encode_image: expected [1x" + std::to_string(s) + "x" +
                                std::to_string(s) + "], got " + shape_str(img.shape()));
  }
  Tensor feat = backbone_.forward(img);
  std::size_t d = feat.size(0), h = feat.size(1), w = feat.size(2);

  Tensor pos = Tensor::zeros({d, h, w});
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      auto p = positional_encoding_2d(static_cast<double>(i), static_cast<double>(j), d);
      for (std::size_t c = 0; c < d; ++c) pos.data()[(c * h + i) * w + j] = p[c];
    }
  }
  Tensor with_pos = add(feat, pos);
  EncoderOutput out;
  out.memory = transpose(reshape(with_pos, {d, h * w}));  // row-major pixel rows
  out.height = h;
  out.width = w;
  return out;
}

Tensor Model::decoder_input(const std::vector<int>& ids, Direction dir) const {
  std::size_t d = static_cast<std::size_t>(cfg_.channels);
  Tensor e = embedding(html_.embedding_table, ids);
  e = add(e, positional_encoding_matrix(ids.size(), d));
  Tensor dir_row = embedding(html_.direction_table, {static_cast<int>(dir)});
  return add_rowvec(e, reshape(dir_row, {d}));
}

HtmlDecoderOutput Model::html_decode_teacher_forced(const std::vector<int>& input_ids,
                                                    Direction dir, const EncoderOutput& enc,
                                                    Rng* dropout_rng) const {
  if (input_ids.empty()) throw std::invalid_argument("html decoder: empty input");
  if (static_cast<int>(input_ids.size()) >= cfg_.max_structure_len) {
    throw std::invalid_argument("html decoder: input of " + std::to_string(input_ids.size()) +
                                " tokens exceeds the structure cap of " +
                                std::to_string(cfg_.max_structure_len));
  }
  Tensor h = decoder_input(input_ids, dir);
  MaskSpec mask = MaskSpec::causal_local(static_cast<std::size_t>(cfg_.html_window));
  for (const auto& block : html_.blocks) {
    h = block.forward(h, enc.memory, mask, dropout_rng);
  }
  HtmlDecoderOutput out;
  out.hidden = html_.final_ln.forward(h);
  out.token_logits = html_.token_head.forward(out.hidden);
  out.bbox_pred = sigmoid(html_.bbox_head.forward(out.hidden));
  return out;
}

Tensor Model::cell_decode_teacher_forced(const std::vector<int>& input_ids,
                                         const Tensor& html_hidden,
                                         const std::vector<int>& inject_rows,
                                         const EncoderOutput& enc, Rng* dropout_rng) const {
  if (input_ids.empty()) throw std::invalid_argument("cell decoder: empty input");
  if (static_cast<int>(input_ids.size()) >= cfg_.max_cell_len) {
    throw std::invalid_argument("cell decoder: input exceeds the cell cap of " +
                                std::to_string(cfg_.max_cell_len));
  }
  if (inject_rows.size() != input_ids.size()) {
    throw std::invalid_argument("cell decoder: one injected feature row per input position required");
  }
  for (int r : inject_rows) {
    if (r < 0 || static_cast<std::size_t>(r) >= html_hidden.size(0)) {
      throw std::invalid_argument("cell decoder: alignment row " + std::to_string(r) +
                                  " out of range for hidden " + shape_str(html_hidden.shape()));
    }
  }
  std::size_t d = static_cast<std::size_t>(cfg_.channels);
  Tensor e = embedding(cell_.embedding_table, input_ids);
  e = add(e, embedding(html_hidden, inject_rows));
  e = add(e, positional_encoding_matrix(input_ids.size(), d));
  MaskSpec mask = MaskSpec::causal_local(static_cast<std::size_t>(cfg_.cell_window));
  for (const auto& block : cell_.blocks) {
    e = block.forward(e, enc.memory, mask, dropout_rng);
  }
  return cell_.head.forward(cell_.final_ln.forward(e));
}

bool CellOpenTracker::feed(const std::string& token) {
  if (in_attr_run) {
    if (token == ">") {
      in_attr_run = false;
      return true;
    }
    return false;
  }
  if (token == "<td") {
    in_attr_run = true;
    return false;
  }
  return token == "<td></td>";
}

namespace {

int argmax_row(const Tensor& logits, std::size_t row) {
  std::size_t v = logits.size(1);
  const double* r = logits.data().data() + row * v;
  int best = 0;
  for (std::size_t j = 1; j < v; ++j) {
    if (r[j] > r[best]) best = static_cast<int>(j);
  }
  return best;
}

}  // namespace

DecodedStructure Model::greedy_decode_structure(const EncoderOutput& enc,
                                                const TokenVocab& vocab) const {
  NoGradGuard ng;
  DecodedStructure out;
  std::vector<int> ids{TokenVocab::kSos};
  CellOpenTracker tracker;
  // room for SOS + tokens + EOS within the cap
  while (static_cast<int>(ids.size()) + 1 < cfg_.max_structure_len) {
    HtmlDecoderOutput dec = html_decode_teacher_forced(ids, Direction::LtoR, enc);
    std::size_t last = ids.size() - 1;
    int next = argmax_row(dec.token_logits, last);
    if (next == TokenVocab::kEos) break;
    const std::string& tok = vocab.token_of(next);
    bool opens = tracker.feed(tok);
    out.token_ids.push_back(next);
    out.opens_cell.push_back(opens);
    if (opens) {
      out.bboxes.push_back({dec.bbox_pred.at(last, 0), dec.bbox_pred.at(last, 1),
                            dec.bbox_pred.at(last, 2), dec.bbox_pred.at(last, 3)});
      out.cell_input_positions.push_back(static_cast<int>(ids.size()));
    }
    ids.push_back(next);
  }
  return out;
}

std::vector<int> cell_inject_rows(const std::vector<int>& cell_input_ids,
                                  const std::vector<int>& cell_input_positions) {
  std::vector<int> rows(cell_input_ids.size());
  int ncells = static_cast<int>(cell_input_positions.size());
  int seps = 0;
  for (std::size_t t = 0; t < cell_input_ids.size(); ++t) {
    if (cell_input_ids[t] == TokenVocab::kSep) ++seps;
    rows[t] = cell_input_positions[static_cast<std::size_t>(std::min(seps, ncells - 1))];
  }
  return rows;
}

std::vector<std::string> Model::greedy_decode_cells(const EncoderOutput& enc,
                                                    const Tensor& html_hidden,
                                                    const std::vector<int>& cell_input_positions,
                                                    const TokenVocab& cell_vocab) const {
  int ncells = static_cast<int>(cell_input_positions.size());
  if (ncells == 0) return {};
  NoGradGuard ng;
  std::vector<int> input{TokenVocab::kSos};
  int seps = 0;
  while (static_cast<int>(input.size()) + 1 < cfg_.max_cell_len) {
    std::vector<int> inject = cell_inject_rows(input, cell_input_positions);
    Tensor logits = cell_decode_teacher_forced(input, html_hidden, inject, enc);
    int next = argmax_row(logits, input.size() - 1);
    if (next == TokenVocab::kEos) break;
    if (next == TokenVocab::kSep) {
      ++seps;
      if (seps >= ncells) break;  // the last cell just closed
    }
    input.push_back(next);
  }
  std::vector<std::string> cells(static_cast<std::size_t>(ncells));
  int c = 0;
  for (std::size_t i = 1; i < input.size() && c < ncells; ++i) {
    if (input[i] == TokenVocab::kSep) {
      ++c;
      continue;
    }
    cells[static_cast<std::size_t>(c)] += cell_vocab.token_of(input[i]);
  }
  return cells;
}

std::string assemble_html(const StructureSeq& structure, const std::vector<std::string>& cells,
                          const TokenVocab& vocab, bool bold_flag) {
  if (structure.cell_count() != cells.size()) {
    throw std::invalid_argument("assemble error: " + std::to_string(cells.size()) +
                                " contents for " + std::to_string(structure.cell_count()) +
                                " cells");
  }
  std::string body;
  std::size_t next_cell = 0;
  for (std::size_t i = 0; i < structure.ids.size(); ++i) {
    const std::string& tok = vocab.token_of(structure.ids[i]);
    bool opens = structure.opens_cell[i];
    if (!opens) {
      body += tok;
      continue;
    }
    std::string content = cells[next_cell];
    if (bold_flag && structure.in_header[i] && !content.empty()) {
      content = "<b>" + content + "</b>";
    }
    ++next_cell;
    if (tok == "<td></td>") {
      body += "<td>" + content + "</td>";
    } else {
      body += tok + content;  // '>' of an attributed cell; '</td>' follows in the stream
    }
  }
  return "<html><body><table>" + body + "</table></body></html>";
}

void Model::save_checkpoint(const std::string& dir) const {
  fs::create_directories(fs::path(dir) / "params");
  KvSections manifest;
  manifest["model"] = cfg_.to_kv();
  for (std::size_t i = 0; i < params_.items.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "p%04zu.bin", i);
    std::string rel = std::string("params/") + name;
    manifest["params"][params_.items[i].first] = rel;
    save_tensor_blob((fs::path(dir) / rel).string(), params_.items[i].second);
  }
  write_kv_file((fs::path(dir) / "manifest.txt").string(), manifest);
}

Model Model::load_checkpoint(const std::string& dir) {
  KvSections manifest = read_kv_file((fs::path(dir) / "manifest.txt").string());
  auto model_it = manifest.find("model");
  if (model_it == manifest.end()) {
    throw std::runtime_error("checkpoint manifest missing [model] section: " + dir);
  }
  Model m(ModelConfig::from_kv(model_it->second));
  const auto& files = manifest["params"];
  for (auto& [name, tensor] : m.params_.items) {
    auto it = files.find(name);
    if (it == files.end()) {
      throw std::runtime_error("checkpoint missing parameter '" + name + "' in " + dir);
    }
    Tensor loaded = load_tensor_blob((fs::path(dir) / it->second).string());
    if (loaded.shape() != tensor.shape()) {
      throw std::runtime_error("checkpoint parameter '" + name + "' has shape " +
                               shape_str(loaded.shape()) + ", expected " +
                               shape_str(tensor.shape()));
    }
    tensor.data() = loaded.data();
  }
  return m;
}

}  // namespace mutab
