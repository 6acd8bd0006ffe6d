#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "mutab.h"

namespace fs = std::filesystem;

namespace {

struct Handle {
  mutab_run* run = nullptr;
  Handle() { REQUIRE(mutab_run_create(&run) == MUTAB_OK); }
  ~Handle() { mutab_run_destroy(run); }
};

fs::path temp_root() {
  fs::path p = fs::temp_directory_path() / "mutab_capi_test";
  return p;
}

}  // namespace

TEST_CASE("version and argument validation") {
  CHECK(std::strlen(mutab_version()) > 0);
  CHECK(mutab_run_create(nullptr) == MUTAB_ERR_INVALID_ARGUMENT);
  Handle h;
  CHECK(mutab_run_set(h.run, nullptr, "x") == MUTAB_ERR_INVALID_ARGUMENT);
  CHECK(mutab_run_set(h.run, "nodot", "x") == MUTAB_ERR_INVALID_ARGUMENT);
  CHECK(std::strlen(mutab_last_error()) > 0);
  CHECK(mutab_run_load_config(h.run, "/no/such/file.ini") == MUTAB_ERR_IO);
}

TEST_CASE("commands report missing settings as invalid arguments") {
  Handle h;
  CHECK(mutab_run_train(h.run) == MUTAB_ERR_INVALID_ARGUMENT);
  CHECK(std::string(mutab_last_error()).find("train.data") != std::string::npos);
  CHECK(mutab_run_synth(h.run) == MUTAB_ERR_INVALID_ARGUMENT);
  CHECK(mutab_run_eval(h.run) == MUTAB_ERR_INVALID_ARGUMENT);
}

TEST_CASE("full lifecycle through the c api") {
  fs::path root = temp_root();
  fs::remove_all(root);
  fs::create_directories(root);

  {
    Handle synth;
    CHECK(mutab_run_set(synth.run, "run.out", (root / "data").c_str()) == MUTAB_OK);
    CHECK(mutab_run_set(synth.run, "run.seed", "3") == MUTAB_OK);
    CHECK(mutab_run_set(synth.run, "synth.n", "3") == MUTAB_OK);
    CHECK(mutab_run_set(synth.run, "synth.rows", "2") == MUTAB_OK);
    CHECK(mutab_run_set(synth.run, "synth.cols", "2") == MUTAB_OK);
    CHECK(mutab_run_set(synth.run, "synth.image_size", "32") == MUTAB_OK);
    CHECK(mutab_run_synth(synth.run) == MUTAB_OK);
  }

  {
    Handle train;
    CHECK(mutab_run_set(train.run, "run.out", (root / "run").c_str()) == MUTAB_OK);
    CHECK(mutab_run_set(train.run, "train.data", (root / "data").c_str()) == MUTAB_OK);
    CHECK(mutab_run_set(train.run, "train.epochs", "1") == MUTAB_OK);
    CHECK(mutab_run_set(train.run, "train.max_steps", "2") == MUTAB_OK);
    CHECK(mutab_run_set(train.run, "model.channels", "16") == MUTAB_OK);
    CHECK(mutab_run_set(train.run, "model.heads", "2") == MUTAB_OK);
    CHECK(mutab_run_set(train.run, "model.image_size", "32") == MUTAB_OK);
    CHECK(mutab_run_set(train.run, "model.gca_bottleneck", "4") == MUTAB_OK);
    CHECK(mutab_run_set(train.run, "model.max_structure_len", "48") == MUTAB_OK);
    CHECK(mutab_run_set(train.run, "model.max_cell_len", "64") == MUTAB_OK);
    CHECK(mutab_run_train(train.run) == MUTAB_OK);
    // train's final validation leaves a report on the handle
    std::string report = mutab_run_report_json(train.run);
    CHECK(nlohmann::json::parse(report)["aggregates"]["all"]["count"] == 3);
  }

  {
    Handle infer;
    CHECK(mutab_run_set(infer.run, "run.out", (root / "preds").c_str()) == MUTAB_OK);
    CHECK(mutab_run_set(infer.run, "infer.ckpt", (root / "run" / "checkpoints" / "last").c_str()) ==
          MUTAB_OK);
    CHECK(mutab_run_set(infer.run, "infer.images", (root / "data" / "images").c_str()) == MUTAB_OK);
    CHECK(mutab_run_infer(infer.run) == MUTAB_OK);
  }

  {
    Handle eval;
    CHECK(mutab_run_set(eval.run, "eval.pred", (root / "preds").c_str()) == MUTAB_OK);
    CHECK(mutab_run_set(eval.run, "eval.gt", (root / "data" / "annotations.jsonl").c_str()) ==
          MUTAB_OK);
    CHECK(mutab_run_eval(eval.run) == MUTAB_OK);
    nlohmann::json report = nlohmann::json::parse(mutab_run_report_json(eval.run));
    CHECK(report["per_sample"].size() == 3);
  }

  fs::remove_all(root);
}

TEST_CASE("one-shot teds scoring") {
  const char* a = "<html><body><table><tr><td>x</td></tr></table></body></html>";
  const char* b = "<html><body><table><tr><td>y</td></tr></table></body></html>";
  double s = -1;
  CHECK(mutab_teds(a, a, 0, &s) == MUTAB_OK);
  CHECK(s == 1.0);
  CHECK(mutab_teds(a, b, 1, &s) == MUTAB_OK);
  CHECK(s == 1.0);  // structural mode ignores contents
  CHECK(mutab_teds(a, b, 0, &s) == MUTAB_OK);
  CHECK(s < 1.0);
  CHECK(mutab_teds("<div>no table</div>", a, 0, &s) == MUTAB_ERR_INVALID_ARGUMENT);
  CHECK(mutab_teds(nullptr, a, 0, &s) == MUTAB_ERR_INVALID_ARGUMENT);
}
