#include "mutab/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "mutab/png_io.hpp"
#include "mutab/rng.hpp"

namespace mutab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t comma = s.find(',', pos);
    std::string part = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!part.empty()) out.push_back(std::stoi(part));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

ScheduleSpec parse_schedule(const std::string& s) {
  ScheduleSpec spec;
  if (s.empty()) return spec;
  spec.phases.clear();
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t comma = s.find(',', pos);
    std::string part = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    std::size_t colon = part.find(':');
    if (colon == std::string::npos) {
      throw std::invalid_argument("schedule phases must look like 'epochs:rate'");
    }
    spec.phases.push_back({std::stoi(part.substr(0, colon)), std::stod(part.substr(colon + 1))});
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  spec.validate();
  return spec;
}

std::vector<CorpusSample> to_corpus(const std::vector<TableSample>& samples) {
  std::vector<CorpusSample> corpus;
  corpus.reserve(samples.size());
  for (const auto& s : samples) {
    CorpusSample c;
    c.structure_tokens = s.structure_tokens;
    for (const auto& cell : s.cells) c.cells.push_back(cell.content);
    corpus.push_back(std::move(c));
  }
  return corpus;
}

std::vector<TableSample> load_dataset_dir(const std::string& dir, const std::string& split,
                                          bool attach_images, DatasetStats* stats = nullptr) {
  fs::path annotations = fs::path(dir) / "annotations.jsonl";
  auto samples = load_jsonl_dataset(annotations.string(), split, 0, stats);
  if (attach_images) {
    for (auto& s : samples) {
      s.image = read_png_gray((fs::path(dir) / "images" / s.filename).string());
    }
  }
  return samples;
}

void save_bundle(const std::string& dir, const Model& model, const TokenVocab& sv,
                 const TokenVocab& cv, bool bold) {
  model.save_checkpoint(dir);
  sv.save((fs::path(dir) / "structure_vocab.txt").string());
  cv.save((fs::path(dir) / "cell_vocab.txt").string());
  KvSections extra;
  extra["tokenizer"]["strip_header_bold"] = bold ? "true" : "false";
  write_kv_file((fs::path(dir) / "tokenizer.txt").string(), extra);
}

struct Bundle {
  Model model;
  TokenVocab sv, cv;
  bool bold = false;
};

Bundle load_bundle(const std::string& dir) {
  Bundle b{Model::load_checkpoint(dir), TokenVocab::load((fs::path(dir) / "structure_vocab.txt").string()),
           TokenVocab::load((fs::path(dir) / "cell_vocab.txt").string()), false};
  KvSections extra = read_kv_file((fs::path(dir) / "tokenizer.txt").string());
  b.bold = extra["tokenizer"]["strip_header_bold"] == "true";
  return b;
}

std::string html_filename(const std::string& image_filename) {
  std::size_t dot = image_filename.find_last_of('.');
  std::string stem = dot == std::string::npos ? image_filename : image_filename.substr(0, dot);
  return stem + ".html";
}

std::string assemble_ground_truth(const TableSample& sample, TokenVocab& sv, TokenVocab& cv,
                                  const TokenizerOptions& topts) {
  StructureSeq seq = tokenize_structure(sample.structure_tokens, sv, topts);
  std::vector<std::string> contents;
  for (const auto& c : sample.cells) contents.push_back(c.content);
  // contents in the annotation still carry <b></b>; strip when the rule is on
  if (topts.strip_header_bold) {
    auto pos = seq.cell_positions();
    for (std::size_t i = 0; i < contents.size() && i < pos.size(); ++i) {
      if (!seq.in_header[pos[i]]) continue;
      auto chars = split_cell_chars(contents[i]);
      if (chars.size() >= 2 && chars.front() == "<b>" && chars.back() == "</b>") {
        contents[i] = contents[i].substr(3, contents[i].size() - 7);
      }
    }
  }
  return assemble_html(seq, contents, sv, topts.strip_header_bold);
}

// Decodes every sample and scores it against the assembled ground truth.
TedsReport evaluate_model(const Model& model, const std::vector<TableSample>& samples,
                          TokenVocab& sv, TokenVocab& cv, const TokenizerOptions& topts,
                          int workers) {
  std::vector<TedsPair> pairs(samples.size());
  auto decode_one = [&](std::size_t i) {
    const TableSample& s = samples[i];
    auto [img, rec] = preprocess_image(s.image, static_cast<std::size_t>(model.config().image_size),
                                       model.config().standardize_images);
    InferenceResult res = infer_sample(model, img, sv, cv, topts.strip_header_bold);
    pairs[i] = {s.filename, assemble_ground_truth(s, sv, cv, topts), res.html};
  };
  if (workers <= 1 || samples.size() < 2) {
    for (std::size_t i = 0; i < samples.size(); ++i) decode_one(i);
  } else {
    std::vector<std::thread> pool;
    std::size_t nw = std::min<std::size_t>(static_cast<std::size_t>(workers), samples.size());
    for (std::size_t w = 0; w < nw; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < samples.size(); i += nw) decode_one(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  return teds_batch_report(pairs, workers);
}

struct TrainOpts {
  int epochs = 0;
  int batch = 2;
  int max_steps = 0;
  bool use_bml = true;
  std::uint64_t seed = 1;
  bool final_eval = true;
  int keep_checkpoints = 3;
  int workers = 1;
  LossWeights weights;
  ScheduleSpec schedule;
  OptimizerConfig optim;
};

struct TrainOutcome {
  double structural = 0.0;
  double total = 0.0;
  int steps = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
  std::string report_json;
};

void prune_checkpoints(const fs::path& dir, int keep) {
  std::vector<fs::path> epochs;
  if (!fs::exists(dir)) return;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && e.path().filename().string().rfind("epoch_", 0) == 0) {
      epochs.push_back(e.path());
    }
  }
  std::sort(epochs.begin(), epochs.end());
  while (static_cast<int>(epochs.size()) > keep) {
    fs::remove_all(epochs.front());
    epochs.erase(epochs.begin());
  }
}

TrainOutcome train_once(const ModelConfig& cfg, const std::vector<TableSample>& samples,
                        TokenVocab& sv, TokenVocab& cv, const TokenizerOptions& topts,
                        const TrainOpts& opts, const std::string& out_dir) {
  fs::create_directories(out_dir);
  Model model(cfg);
  Optimizer opt(model.params(), opts.optim);
  ScheduleSpec sched = scale_schedule(opts.schedule, opts.epochs);

  Rng shuffle_rng(opts.seed ^ 0x9e3779b97f4a7c15ull);
  Rng dropout_rng(opts.seed ^ 0x0d20f00dd20f00dull);

  std::ofstream log((fs::path(out_dir) / "train_log.jsonl").string());
  if (!log) throw std::runtime_error("cannot write training log in " + out_dir);

  TrainOutcome outcome;
  auto t_start = std::chrono::steady_clock::now();
  bool stop = false;
  fs::path ckpt_root = fs::path(out_dir) / "checkpoints";

  for (int epoch = 0; epoch < opts.epochs && !stop; ++epoch) {
    double lr = lr_schedule(epoch, sched);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.below(static_cast<int>(i)))]);
    }

    for (std::size_t start = 0; start < order.size() && !stop; start += static_cast<std::size_t>(opts.batch)) {
      std::vector<TableSample> batch_samples;
      for (std::size_t k = start; k < std::min(order.size(), start + static_cast<std::size_t>(opts.batch)); ++k) {
        batch_samples.push_back(samples[order[k]]);
      }
      Batch batch = collate(batch_samples, sv, cv, cfg, topts);
      if (batch.items.empty()) continue;

      model.params().zero_grads();
      double inv = 1.0 / static_cast<double>(batch.items.size());
      SampleLossParts mean{};
      double total_value = 0.0;
      for (const auto& item : batch.items) {
        SampleLossParts parts =
            sample_loss(model, item, opts.weights, opts.use_bml,
                        cfg.dropout > 0.0 ? &dropout_rng : nullptr);
        double v = parts.total.value();
        if (!std::isfinite(v)) {
          throw std::runtime_error("training aborted: non-finite loss at step " +
                                   std::to_string(outcome.steps + 1) +
                                   " (the last epoch checkpoint is retained)");
        }
        total_value += v * inv;
        mean.html_ce_ltor += parts.html_ce_ltor * inv;
        mean.html_ce_rtol += parts.html_ce_rtol * inv;
        mean.kl_rtol_to_ltor += parts.kl_rtol_to_ltor * inv;
        mean.kl_ltor_to_rtol += parts.kl_ltor_to_rtol * inv;
        mean.cell_ce += parts.cell_ce * inv;
        mean.bbox_l1 += parts.bbox_l1 * inv;
        backward(scale(parts.total, inv));
      }
      opt.step(lr);
      ++outcome.steps;
      if (outcome.steps == 1) outcome.first_loss = total_value;
      outcome.last_loss = total_value;

      auto wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::steady_clock::now() - t_start)
                         .count();
      json line = {{"epoch", epoch},
                   {"step", outcome.steps},
                   {"lr", lr},
                   {"loss", total_value},
                   {"html_ce_ltor", mean.html_ce_ltor},
                   {"html_ce_rtol", mean.html_ce_rtol},
                   {"kl_rtol_to_ltor", mean.kl_rtol_to_ltor},
                   {"kl_ltor_to_rtol", mean.kl_ltor_to_rtol},
                   {"cell_ce", mean.cell_ce},
                   {"bbox_l1", mean.bbox_l1},
                   {"wall_ms", wall_ms}};
      log << line.dump() << '\n';
      if (outcome.steps % 50 == 0) {
        std::printf("step %6d  epoch %4d  lr %.2e  loss %.6f\n", outcome.steps, epoch, lr,
                    total_value);
        std::fflush(stdout);
      }
      if (opts.max_steps > 0 && outcome.steps >= opts.max_steps) stop = true;
    }

    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%04d", epoch);
    save_bundle((ckpt_root / name).string(), model, sv, cv, topts.strip_header_bold);
    save_bundle((ckpt_root / "last").string(), model, sv, cv, topts.strip_header_bold);
    prune_checkpoints(ckpt_root, opts.keep_checkpoints);
  }
  log.close();

  if (opts.final_eval) {
    TedsReport report = evaluate_model(model, samples, sv, cv, topts, opts.workers);
    outcome.structural = report.all_agg.structural;
    outcome.total = report.all_agg.total;
    outcome.report_json = report.to_json();
    std::ofstream rep((fs::path(out_dir) / "val_teds.json").string());
    rep << outcome.report_json;
    std::printf("final TEDS on %zu samples: structural %.4f, total %.4f\n", samples.size(),
                outcome.structural, outcome.total);
    std::fflush(stdout);
  }
  return outcome;
}

}  // namespace

void Run::set(const std::string& dotted_key, const std::string& value) {
  std::size_t dot = dotted_key.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == dotted_key.size()) {
    throw std::invalid_argument("setting keys look like 'section.key', got '" + dotted_key + "'");
  }
  kv_[dotted_key.substr(0, dot)][dotted_key.substr(dot + 1)] = value;
}

void Run::load_config_file(const std::string& path) {
  KvSections file = read_kv_file(path);
  for (const auto& [section, entries] : file) {
    for (const auto& [k, v] : entries) {
      // file values fill gaps; explicit set() wins
      kv_[section].emplace(k, v);
    }
  }
}

std::string Run::get(const std::string& key, const std::string& def) const {
  std::size_t dot = key.find('.');
  auto sit = kv_.find(key.substr(0, dot));
  if (sit == kv_.end()) return def;
  auto it = sit->second.find(key.substr(dot + 1));
  return it == sit->second.end() ? def : it->second;
}

bool Run::has(const std::string& key) const {
  std::size_t dot = key.find('.');
  auto sit = kv_.find(key.substr(0, dot));
  return sit != kv_.end() && sit->second.count(key.substr(dot + 1)) > 0;
}

int Run::geti(const std::string& key, int def) const {
  std::string v = get(key, "");
  return v.empty() ? def : std::stoi(v);
}

double Run::getd(const std::string& key, double def) const {
  std::string v = get(key, "");
  return v.empty() ? def : std::stod(v);
}

bool Run::getb(const std::string& key, bool def) const {
  std::string v = get(key, "");
  if (v.empty()) return def;
  return v == "1" || v == "true" || v == "yes" || v == "on";
}

ModelConfig Run::model_config_from_settings(int structure_vocab, int cell_vocab) const {
  ModelConfig cfg = ModelConfig::preset(get("train.preset", "tiny"));
  if (has("model.image_size")) cfg.image_size = geti("model.image_size", cfg.image_size);
  if (has("model.channels")) cfg.channels = geti("model.channels", cfg.channels);
  if (has("model.heads")) cfg.heads = geti("model.heads", cfg.heads);
  if (has("model.html_blocks")) cfg.html_blocks = geti("model.html_blocks", cfg.html_blocks);
  if (has("model.cell_blocks")) cfg.cell_blocks = geti("model.cell_blocks", cfg.cell_blocks);
  if (has("model.html_window")) cfg.html_window = geti("model.html_window", cfg.html_window);
  if (has("model.cell_window")) cfg.cell_window = geti("model.cell_window", cfg.cell_window);
  if (has("model.max_structure_len"))
    cfg.max_structure_len = geti("model.max_structure_len", cfg.max_structure_len);
  if (has("model.max_cell_len")) cfg.max_cell_len = geti("model.max_cell_len", cfg.max_cell_len);
  if (has("model.ffn_mult")) cfg.ffn_mult = geti("model.ffn_mult", cfg.ffn_mult);
  if (has("model.gca_bottleneck"))
    cfg.gca_bottleneck = geti("model.gca_bottleneck", cfg.gca_bottleneck);
  if (has("model.dropout")) cfg.dropout = getd("model.dropout", cfg.dropout);
  if (has("model.backbone")) cfg.backbone = get("model.backbone", cfg.backbone);
  if (has("model.standardize")) cfg.standardize_images = getb("model.standardize", false);
  if (has("train.cell_window")) cfg.cell_window = geti("train.cell_window", cfg.cell_window);
  cfg.structure_vocab = structure_vocab;
  cfg.cell_vocab = cell_vocab;
  cfg.seed = static_cast<std::uint64_t>(geti("run.seed", 1));
  return cfg;
}

ScheduleSpec Run::schedule_from_settings() const {
  return parse_schedule(get("schedule.phases", ""));
}

LossWeights Run::weights_from_settings() const {
  LossWeights w;
  w.w_html = getd("loss.w_html", w.w_html);
  w.w_cell = getd("loss.w_cell", w.w_cell);
  w.w_bbox = getd("loss.w_bbox", w.w_bbox);
  w.w_kl = getd("loss.w_kl", w.w_kl);
  w.validate();
  return w;
}

void Run::echo_config(const std::string& out_dir) const {
  write_kv_file((fs::path(out_dir) / "config_echo.txt").string(), kv_);
}

RunStatus Run::run_synth() {
  std::string out_dir = get("run.out", "");
  if (out_dir.empty()) throw std::invalid_argument("run.out is required for synth");
  int n = geti("synth.n", 10);
  if (n < 1) throw std::invalid_argument("synth.n must be >= 1");
  SynthSpec spec;
  spec.rows = geti("synth.rows", spec.rows);
  spec.cols = geti("synth.cols", spec.cols);
  spec.merge_prob = getd("synth.merge_prob", spec.merge_prob);
  spec.image_size = geti("synth.image_size", spec.image_size);
  spec.empty_cell_prob = getd("synth.empty_cell_prob", spec.empty_cell_prob);
  std::uint64_t seed = static_cast<std::uint64_t>(geti("run.seed", 1));

  fs::create_directories(fs::path(out_dir) / "images");
  echo_config(out_dir);

  std::vector<TableSample> samples;
  std::size_t complex_count = 0;
  for (int i = 0; i < n; ++i) {
    std::uint64_t sample_seed = seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(i + 1);
    SyntheticTable t = generate_synthetic_table(sample_seed, spec);
    char name[32];
    std::snprintf(name, sizeof(name), "table_%06d.png", i);
    t.sample.filename = name;
    write_png_gray((fs::path(out_dir) / "images" / name).string(), t.sample.image);
    complex_count += t.complex ? 1 : 0;
    samples.push_back(std::move(t.sample));
  }
  save_jsonl_dataset((fs::path(out_dir) / "annotations.jsonl").string(), samples);

  std::printf("synthesized %d tables (%zu simple, %zu complex) into %s\n", n,
              samples.size() - complex_count, complex_count, out_dir.c_str());
  std::fflush(stdout);
  return RunStatus::Ok;
}

RunStatus Run::run_train() {
  std::string data_dir = get("train.data", "");
  std::string out_dir = get("run.out", "");
  if (data_dir.empty()) throw std::invalid_argument("train.data is required");
  if (out_dir.empty()) throw std::invalid_argument("run.out is required for train");
  fs::create_directories(out_dir);
  echo_config(out_dir);

  DatasetStats stats;
  auto samples = load_dataset_dir(data_dir, get("train.split", "train"), true, &stats);
  if (samples.empty()) throw std::runtime_error("no training samples found under " + data_dir);
  if (stats.skipped_malformed > 0) {
    std::fprintf(stderr, "warning: skipped %zu malformed annotation lines\n",
                 stats.skipped_malformed);
  }

  auto corpus = to_corpus(samples);
  TokenizerOptions topts;
  topts.strip_header_bold = detect_header_bold(corpus);
  auto [sv, cv] = build_vocab(corpus, topts);
  sv.freeze();
  cv.freeze();

  TrainOpts opts;
  opts.schedule = schedule_from_settings();
  opts.epochs = geti("train.epochs", opts.schedule.total_epochs());
  opts.batch = std::max(1, geti("train.batch", 2));
  opts.max_steps = geti("train.max_steps", 0);
  opts.use_bml = !getb("train.no_bml", false);
  opts.seed = static_cast<std::uint64_t>(geti("run.seed", 1));
  opts.final_eval = getb("train.eval", true);
  opts.keep_checkpoints = std::max(1, geti("train.keep_checkpoints", 3));
  opts.workers = std::max(1, geti("run.workers", 1));
  opts.weights = weights_from_settings();
  if (!opts.use_bml) opts.weights.w_kl = 0.0;
  opts.optim.lookahead = getb("optim.lookahead", true);

  std::vector<int> windows = parse_int_list(get("train.html_window", ""));

  if (windows.size() <= 1) {
    ModelConfig cfg = model_config_from_settings(static_cast<int>(sv.size()),
                                                 static_cast<int>(cv.size()));
    if (windows.size() == 1) cfg.html_window = windows[0];
    TrainOutcome outcome = train_once(cfg, samples, sv, cv, topts, opts, out_dir);
    report_json_ = outcome.report_json;
    return RunStatus::Ok;
  }

  // window sweep: one training per window, one report row each
  json sweep = json::array();
  std::printf("window  steps  structural      total\n");
  for (int w : windows) {
    ModelConfig cfg = model_config_from_settings(static_cast<int>(sv.size()),
                                                 static_cast<int>(cv.size()));
    cfg.html_window = w;
    std::string sub = (fs::path(out_dir) / ("sweep_w" + std::to_string(w))).string();
    TrainOutcome outcome = train_once(cfg, samples, sv, cv, topts, opts, sub);
    std::printf("%6d %6d    %8.4f   %8.4f\n", w, outcome.steps, outcome.structural, outcome.total);
    std::fflush(stdout);
    sweep.push_back({{"html_window", w},
                     {"steps", outcome.steps},
                     {"structural", outcome.structural},
                     {"total", outcome.total}});
  }
  json out = {{"sweep", sweep}};
  report_json_ = out.dump(2);
  std::ofstream rep((fs::path(out_dir) / "sweep_report.json").string());
  rep << report_json_;
  return RunStatus::Ok;
}

RunStatus Run::run_infer() {
  std::string ckpt = get("infer.ckpt", "");
  std::string images = get("infer.images", "");
  std::string out_dir = get("run.out", "");
  if (ckpt.empty() || out_dir.empty()) {
    throw std::invalid_argument("infer.ckpt and run.out are required");
  }
  fs::create_directories(out_dir);
  echo_config(out_dir);

  Bundle bundle = load_bundle(ckpt);

  std::vector<std::string> files;
  if (fs::is_directory(images)) {
    for (const auto& e : fs::directory_iterator(images)) {
      if (e.path().extension() == ".png") files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
  } else if (!images.empty()) {
    files.push_back(images);
  }

  struct Row {
    bool failed = false;
    std::string filename;
    json entry;
  };
  std::vector<Row> rows(files.size());
  int workers = std::max(1, geti("run.workers", 1));

  auto infer_one = [&](std::size_t i) {
    Row& row = rows[i];
    row.filename = fs::path(files[i]).filename().string();
    try {
      GrayImage raw = read_png_gray(files[i]);
      auto [img, rec] =
          preprocess_image(raw, static_cast<std::size_t>(bundle.model.config().image_size),
                           bundle.model.config().standardize_images);
      InferenceResult res = infer_sample(bundle.model, img, bundle.sv, bundle.cv, bundle.bold);
      json cells = json::array();
      for (std::size_t c = 0; c < res.cells.size(); ++c) {
        json cell;
        cell["content"] = res.cells[c];
        if (c < res.bboxes.size()) {
          auto px = denormalize_bbox(res.bboxes[c], rec);
          cell["bbox"] = {px[0], px[1], px[2], px[3]};
        }
        cells.push_back(std::move(cell));
      }
      row.entry = {{"filename", row.filename}, {"html", res.html}, {"cells", cells}};
      std::ofstream html_out((fs::path(out_dir) / html_filename(row.filename)).string());
      html_out << res.html;
    } catch (const std::exception& e) {
      row.failed = true;
      row.entry = {{"filename", row.filename}, {"error", e.what()}};
    }
  };

  if (workers <= 1 || files.size() < 2) {
    for (std::size_t i = 0; i < files.size(); ++i) infer_one(i);
  } else {
    std::vector<std::thread> pool;
    std::size_t nw = std::min<std::size_t>(static_cast<std::size_t>(workers), files.size());
    for (std::size_t w = 0; w < nw; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < files.size(); i += nw) infer_one(i);
      });
    }
    for (auto& t : pool) t.join();
  }

  std::ofstream results((fs::path(out_dir) / "results.jsonl").string());
  std::size_t failures = 0;
  for (const auto& row : rows) {
    if (row.failed) {
      ++failures;
      continue;
    }
    results << row.entry.dump() << '\n';
  }
  if (failures > 0) {
    std::fprintf(stderr, "failures (%zu):\n", failures);
    for (const auto& row : rows) {
      if (row.failed) std::fprintf(stderr, "  %s: %s\n", row.filename.c_str(),
                                   row.entry.value("error", "").c_str());
    }
  }
  std::printf("inferred %zu images (%zu failed) into %s\n", files.size(), failures,
              out_dir.c_str());
  std::fflush(stdout);
  return failures == 0 ? RunStatus::Ok : RunStatus::Partial;
}

RunStatus Run::run_eval() {
  std::string pred_dir = get("eval.pred", "");
  std::string gt_file = get("eval.gt", "");
  if (pred_dir.empty() || gt_file.empty()) {
    throw std::invalid_argument("eval.pred and eval.gt are required");
  }
  std::string out_dir = get("run.out", "");
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    echo_config(out_dir);
  }

  auto gt_samples = load_jsonl_dataset(gt_file, get("eval.split", ""), 0, nullptr);
  if (gt_samples.empty()) throw std::runtime_error("no ground-truth samples in " + gt_file);

  auto corpus = to_corpus(gt_samples);
  TokenizerOptions topts;
  topts.strip_header_bold = detect_header_bold(corpus);
  TokenVocab sv = TokenVocab::structure_vocab();
  TokenVocab cv = TokenVocab::cell_vocab();

  std::vector<TedsPair> pairs;
  for (const auto& s : gt_samples) {
    TedsPair p;
    p.filename = s.filename;
    p.gt_html = assemble_ground_truth(s, sv, cv, topts);
    fs::path pred = fs::path(pred_dir) / html_filename(s.filename);
    if (fs::exists(pred)) {
      std::ifstream is(pred.string());
      std::string html((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
      p.pred_html = html;
    }
    pairs.push_back(std::move(p));
  }

  TedsReport report = teds_batch_report(pairs, std::max(1, geti("run.workers", 1)));
  report_json_ = report.to_json();
  std::fputs(report.to_text().c_str(), stdout);
  std::fflush(stdout);

  std::string json_path = get("eval.json", out_dir.empty() ? "" : (fs::path(out_dir) / "teds_report.json").string());
  if (!json_path.empty()) {
    std::ofstream os(json_path);
    os << report_json_;
  }
  return RunStatus::Ok;
}

SampleLossParts sample_loss(const Model& model, const BatchItem& item, const LossWeights& weights,
                            bool use_bml, Rng* dropout_rng) {
  std::size_t n_s = 0, n_c = 0;
  for (auto m : item.target_mask) n_s += m;
  for (auto m : item.cell_mask) n_c += m;
  if (n_s == 0) throw std::invalid_argument("sample_loss: structure sequence is empty");

  std::vector<int> lin(item.ltor_input.begin(), item.ltor_input.begin() + static_cast<long>(n_s));
  std::vector<int> ltg(item.ltor_target.begin(), item.ltor_target.begin() + static_cast<long>(n_s));

  EncoderOutput enc = model.encode_image(item.image, dropout_rng);
  HtmlDecoderOutput fwd = model.html_decode_teacher_forced(lin, Direction::LtoR, enc, dropout_rng);

  SampleLossParts parts;
  LossParts loss_parts;
  if (use_bml) {
    std::vector<int> rin(item.rtol_input.begin(), item.rtol_input.begin() + static_cast<long>(n_s));
    HtmlDecoderOutput bwd =
        model.html_decode_teacher_forced(rin, Direction::RtoL, enc, dropout_rng);
    BmlResult bml = bml_loss(fwd.token_logits, bwd.token_logits, ltg, TokenVocab::kPad,
                             weights.w_kl, TokenVocab::kEos);
    parts.html_ce_ltor = bml.ce_ltor;
    parts.html_ce_rtol = bml.ce_rtol;
    parts.kl_rtol_to_ltor = bml.kl_rtol_to_ltor;
    parts.kl_ltor_to_rtol = bml.kl_ltor_to_rtol;
    loss_parts.html = bml.total;
  } else {
    Tensor ce = cross_entropy_masked(fwd.token_logits, ltg, TokenVocab::kPad);
    parts.html_ce_ltor = ce.value();
    loss_parts.html = ce;
  }

  if (!item.cell_positions.empty() && n_c > 0) {
    std::vector<int> cin(item.cell_input.begin(), item.cell_input.begin() + static_cast<long>(n_c));
    std::vector<int> ctg(item.cell_target.begin(), item.cell_target.begin() + static_cast<long>(n_c));
    std::vector<int> inject(item.inject_rows.begin(),
                            item.inject_rows.begin() + static_cast<long>(n_c));
    Tensor cell_logits =
        model.cell_decode_teacher_forced(cin, fwd.hidden, inject, enc, dropout_rng);
    Tensor ce = cross_entropy_masked(cell_logits, ctg, TokenVocab::kPad);
    parts.cell_ce = ce.value();
    loss_parts.cell = ce;
  }

  std::vector<std::uint8_t> bbox_mask(item.bbox_mask.begin(),
                                      item.bbox_mask.begin() + static_cast<long>(n_s));
  bool any_bbox = false;
  for (auto m : bbox_mask) any_bbox = any_bbox || m;
  if (any_bbox) {
    Tensor gt = Tensor::zeros({n_s, 4});
    std::copy(item.bbox_targets.data().begin(), item.bbox_targets.data().begin() + 4 * n_s,
              gt.data().begin());
    Tensor bb = bbox_loss(fwd.bbox_pred, gt, bbox_mask);
    parts.bbox_l1 = bb.value();
    loss_parts.bbox = bb;
  }

  parts.total = total_loss(loss_parts, weights);
  return parts;
}

InferenceResult infer_sample(const Model& model, const Tensor& image, const TokenVocab& sv,
                             const TokenVocab& cv, bool bold_flag) {
  NoGradGuard ng;
  EncoderOutput enc = model.encode_image(image);
  DecodedStructure ds = model.greedy_decode_structure(enc, sv);

  InferenceResult res;
  res.structure_ids = ds.token_ids;
  res.bboxes = ds.bboxes;

  if (!ds.cell_input_positions.empty()) {
    std::vector<int> input{TokenVocab::kSos};
    input.insert(input.end(), ds.token_ids.begin(), ds.token_ids.end());
    HtmlDecoderOutput dec = model.html_decode_teacher_forced(input, Direction::LtoR, enc);
    res.cells = model.greedy_decode_cells(enc, dec.hidden, ds.cell_input_positions, cv);
  }

  StructureSeq seq = structure_from_ids(ds.token_ids, sv);
  res.html = assemble_html(seq, res.cells, sv, bold_flag);
  return res;
}

}  // namespace mutab
