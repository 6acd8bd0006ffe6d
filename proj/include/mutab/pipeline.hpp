#pragma once

#include <string>
#include <vector>

#include "mutab/config.hpp"
#include "mutab/data.hpp"
#include "mutab/losses.hpp"
#include "mutab/model.hpp"
#include "mutab/teds.hpp"

namespace mutab {

enum class RunStatus { Ok = 0, Partial = 1 };

// One configured invocation of a pipeline command. Settings live in a flat
// sectioned key-value store ("train.epochs", "run.seed", ...); a config file
// merges first, later set() calls win.
class Run {
 public:
  void set(const std::string& dotted_key, const std::string& value);
  void load_config_file(const std::string& path);

  RunStatus run_synth();
  RunStatus run_train();
  RunStatus run_infer();
  RunStatus run_eval();

  // JSON report produced by the last eval (or train's final validation).
  const std::string& report_json() const { return report_json_; }

  const KvSections& settings() const { return kv_; }

 private:
  KvSections kv_;
  std::string report_json_;

  std::string get(const std::string& key, const std::string& def) const;
  int geti(const std::string& key, int def) const;
  double getd(const std::string& key, double def) const;
  bool getb(const std::string& key, bool def) const;
  bool has(const std::string& key) const;

  ModelConfig model_config_from_settings(int structure_vocab, int cell_vocab) const;
  ScheduleSpec schedule_from_settings() const;
  LossWeights weights_from_settings() const;
  void echo_config(const std::string& out_dir) const;
};

// Per-sample multi-task loss; the RtoL pass is skipped when `use_bml` is off.
struct SampleLossParts {
  Tensor total;
  double html_ce_ltor = 0, html_ce_rtol = 0;
  double kl_rtol_to_ltor = 0, kl_ltor_to_rtol = 0;
  double cell_ce = 0, bbox_l1 = 0;
};

SampleLossParts sample_loss(const Model& model, const BatchItem& item, const LossWeights& weights,
                            bool use_bml, Rng* dropout_rng = nullptr);

// Full greedy inference for one preprocessed image.
struct InferenceResult {
  std::vector<int> structure_ids;
  std::vector<std::string> cells;
  std::vector<std::array<double, 4>> bboxes;  // normalized
  std::string html;
};

InferenceResult infer_sample(const Model& model, const Tensor& image, const TokenVocab& sv,
                             const TokenVocab& cv, bool bold_flag);

}  // namespace mutab
