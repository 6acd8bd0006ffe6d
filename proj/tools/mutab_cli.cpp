// Command-line front end. Everything goes through the C API in mutab.h; this
// file only parses flags and forwards settings.
#include <cstdio>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "mutab.h"

namespace {

struct RunDeleter {
  void operator()(mutab_run* r) const { mutab_run_destroy(r); }
};
using RunHandle = std::unique_ptr<mutab_run, RunDeleter>;

int fail(const char* what, mutab_status st) {
  std::fprintf(stderr, "%s failed (%d): %s\n", what, static_cast<int>(st), mutab_last_error());
  return st == MUTAB_PARTIAL ? 2 : 1;
}

bool set_or_die(mutab_run* run, const std::string& key, const std::string& value) {
  if (mutab_run_set(run, key.c_str(), value.c_str()) != MUTAB_OK) {
    std::fprintf(stderr, "bad setting %s=%s: %s\n", key.c_str(), value.c_str(),
                 mutab_last_error());
    return false;
  }
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"end-to-end table recognition: synthesize, train, infer, evaluate"};
  app.require_subcommand(1);

  std::string config, out, data, preset = "tiny", html_window, images, ckpt, pred, gt, json_out,
              split;
  long long seed = 1;
  int workers = 1, n = 10, rows = 3, cols = 3, image_size = 64, epochs = -1, batch = 2,
      max_steps = 0, cell_window = 0, keep = 3;
  double merge_prob = 0.0, empty_prob = 0.08;
  bool no_bml = false, no_eval = false;

  auto add_shared = [&](CLI::App* sub) {
    sub->add_option("--config", config, "sectioned key=value config file");
    sub->add_option("--seed", seed, "run seed");
    sub->add_option("--workers", workers, "worker threads for per-sample parallelism");
    sub->add_option("--out", out, "output directory");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic table dataset");
  add_shared(synth);
  synth->add_option("--n", n, "number of tables");
  synth->add_option("--rows", rows, "grid rows");
  synth->add_option("--cols", cols, "grid columns");
  synth->add_option("--merge-prob", merge_prob, "probability of a colspan/rowspan merge");
  synth->add_option("--image-size", image_size, "rendered image side in pixels");
  synth->add_option("--empty-prob", empty_prob, "probability of an empty cell");

  CLI::App* train = app.add_subcommand("train", "train a model on a dataset directory");
  add_shared(train);
  train->add_option("--data", data, "dataset directory (annotations.jsonl + images/)")
      ->required();
  train->add_option("--preset", preset, "model preset: tiny or full");
  train->add_option("--epochs", epochs, "epoch count (default: schedule total)");
  train->add_option("--batch", batch, "mini-batch size");
  train->add_option("--max-steps", max_steps, "stop after this many optimizer steps (0 = off)");
  train->add_flag("--no-bml", no_bml, "train one direction only (no mutual learning)");
  train->add_option("--html-window", html_window,
                    "structure-decoder attention window; a comma list runs a sweep");
  train->add_option("--cell-window", cell_window, "cell-decoder attention window");
  train->add_flag("--no-eval", no_eval, "skip the final decoding evaluation");
  train->add_option("--keep-checkpoints", keep, "how many epoch checkpoints to retain");

  CLI::App* infer = app.add_subcommand("infer", "decode images into HTML tables");
  add_shared(infer);
  infer->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  infer->add_option("--images", images, "image file or directory of .png files")->required();

  CLI::App* eval = app.add_subcommand("eval", "score predictions with the tree-edit metric");
  add_shared(eval);
  eval->add_option("--pred", pred, "directory of predicted .html files")->required();
  eval->add_option("--gt", gt, "ground-truth annotations.jsonl")->required();
  eval->add_option("--json", json_out, "where to write the JSON report");
  eval->add_option("--split", split, "restrict ground truth to one split");

  CLI11_PARSE(app, argc, argv);

  RunHandle run;
  {
    mutab_run* raw = nullptr;
    if (mutab_run_create(&raw) != MUTAB_OK) return fail("init", MUTAB_ERR_RUNTIME);
    run.reset(raw);
  }

  if (!config.empty() && mutab_run_load_config(run.get(), config.c_str()) != MUTAB_OK) {
    return fail("config", MUTAB_ERR_IO);
  }

  auto shared_settings = [&](CLI::App* sub) {
    bool ok = true;
    if (sub->count("--seed")) ok = ok && set_or_die(run.get(), "run.seed", std::to_string(seed));
    if (sub->count("--workers"))
      ok = ok && set_or_die(run.get(), "run.workers", std::to_string(workers));
    if (sub->count("--out")) ok = ok && set_or_die(run.get(), "run.out", out);
    return ok;
  };

  if (synth->parsed()) {
    if (!shared_settings(synth)) return 1;
    bool ok = set_or_die(run.get(), "synth.n", std::to_string(n)) &&
              set_or_die(run.get(), "synth.rows", std::to_string(rows)) &&
              set_or_die(run.get(), "synth.cols", std::to_string(cols)) &&
              set_or_die(run.get(), "synth.merge_prob", std::to_string(merge_prob)) &&
              set_or_die(run.get(), "synth.image_size", std::to_string(image_size));
    if (synth->count("--empty-prob")) {
      ok = ok && set_or_die(run.get(), "synth.empty_cell_prob", std::to_string(empty_prob));
    }
    if (!ok) return 1;
    mutab_status st = mutab_run_synth(run.get());
    return st == MUTAB_OK ? 0 : fail("synth", st);
  }

  if (train->parsed()) {
    if (!shared_settings(train)) return 1;
    bool ok = set_or_die(run.get(), "train.data", data) &&
              set_or_die(run.get(), "train.preset", preset);
    if (epochs >= 0) ok = ok && set_or_die(run.get(), "train.epochs", std::to_string(epochs));
    if (train->count("--batch")) ok = ok && set_or_die(run.get(), "train.batch", std::to_string(batch));
    if (max_steps > 0) ok = ok && set_or_die(run.get(), "train.max_steps", std::to_string(max_steps));
    if (no_bml) ok = ok && set_or_die(run.get(), "train.no_bml", "true");
    if (!html_window.empty()) ok = ok && set_or_die(run.get(), "train.html_window", html_window);
    if (cell_window > 0) ok = ok && set_or_die(run.get(), "train.cell_window", std::to_string(cell_window));
    if (no_eval) ok = ok && set_or_die(run.get(), "train.eval", "false");
    if (train->count("--keep-checkpoints"))
      ok = ok && set_or_die(run.get(), "train.keep_checkpoints", std::to_string(keep));
    if (!ok) return 1;
    mutab_status st = mutab_run_train(run.get());
    return st == MUTAB_OK ? 0 : fail("train", st);
  }

  if (infer->parsed()) {
    if (!shared_settings(infer)) return 1;
    if (!set_or_die(run.get(), "infer.ckpt", ckpt) ||
        !set_or_die(run.get(), "infer.images", images)) {
      return 1;
    }
    mutab_status st = mutab_run_infer(run.get());
    return st == MUTAB_OK ? 0 : fail("infer", st);
  }

  if (eval->parsed()) {
    if (!shared_settings(eval)) return 1;
    bool ok = set_or_die(run.get(), "eval.pred", pred) && set_or_die(run.get(), "eval.gt", gt);
    if (!json_out.empty()) ok = ok && set_or_die(run.get(), "eval.json", json_out);
    if (!split.empty()) ok = ok && set_or_die(run.get(), "eval.split", split);
    if (!ok) return 1;
    mutab_status st = mutab_run_eval(run.get());
    return st == MUTAB_OK ? 0 : fail("eval", st);
  }

  return 1;
}
