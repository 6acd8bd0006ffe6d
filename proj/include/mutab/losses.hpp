#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mutab/nn.hpp"
#include "mutab/tensor.hpp"

namespace mutab {

struct LossWeights {
  double w_html = 1.0;
  double w_cell = 1.0;
  double w_bbox = 1.0;
  double w_kl = 1.0;

  void validate() const;
};

// Mean negative log-likelihood over non-pad positions. logits: [L x V].
Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& targets, int pad_id);

// (1/N) sum_n sum_v q_t log(q_t / q_s) over rows where mask is nonzero (all
// rows when mask is empty). The teacher is treated as a constant: no gradient
// flows into it. Student probabilities below 1e-12 are clamped; each clamp
// bumps a counter readable via kl_clamp_count().
Tensor kl_divergence(const Tensor& q_teacher, const Tensor& q_student,
                     const std::vector<std::uint8_t>& mask = {});

std::uint64_t kl_clamp_count();
void kl_clamp_reset();

// Reverses the real-token span of a target row; EOS and pads stay in place.
std::vector<int> mirror_targets(const std::vector<int>& targets, int pad_id, int eos_id);

struct BmlResult {
  Tensor total;
  double ce_ltor = 0.0;
  double ce_rtol = 0.0;
  double kl_rtol_to_ltor = 0.0;  // teacher RtoL, student LtoR
  double kl_ltor_to_rtol = 0.0;  // teacher LtoR, student RtoL
};

// Bidirectional mutual learning over structure-token logits: each direction
// is trained with masked cross entropy plus a KL term matching the partner's
// (detached) distribution at mirror-aligned positions. Position n of one
// direction pairs with position N-n+1 of the other over the N real tokens.
BmlResult bml_loss(const Tensor& logits_ltor, const Tensor& logits_rtol,
                   const std::vector<int>& targets_ltor, int pad_id, double w_kl, int eos_id);

// Mean L1 over the masked positions and all 4 box components; a fully masked
// batch contributes exactly zero.
Tensor bbox_loss(const Tensor& bbox_pred, const Tensor& bbox_gt,
                 const std::vector<std::uint8_t>& cell_mask);

struct LossParts {
  Tensor html;  // bml total (or plain CE when mutual learning is off)
  Tensor cell;  // may be undefined for tables without cells
  Tensor bbox;  // may be undefined
};

// w_html * html + w_cell * cell + w_bbox * bbox; rejects non-finite parts
// naming the offending component.
Tensor total_loss(const LossParts& parts, const LossWeights& weights);

struct SchedulePhase {
  int epochs;
  double lr;
};

struct ScheduleSpec {
  std::vector<SchedulePhase> phases{{25, 1e-3}, {3, 1e-4}, {2, 1e-5}};

  int total_epochs() const;
  void validate() const;
};

// Piecewise-constant rate; epochs past the last boundary keep the last rate.
double lr_schedule(int epoch, const ScheduleSpec& spec);

// Rescales phase lengths proportionally so they sum to total_epochs (each
// phase keeps at least one epoch).
ScheduleSpec scale_schedule(const ScheduleSpec& spec, int total_epochs);

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool lookahead = true;  // slow/fast weight averaging on top of Adam
  int lookahead_k = 6;
  double lookahead_alpha = 0.5;
};

// Adam with bias correction, optionally wrapped in lookahead slow weights.
class Optimizer {
 public:
  Optimizer(ParamRegistry& params, OptimizerConfig cfg = {});

  // Applies one update from the gradients currently stored on the parameters.
  // NaN gradients abort with the parameter name.
  void step(double lr);

  int steps_taken() const { return t_; }

 private:
  ParamRegistry& params_;
  OptimizerConfig cfg_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_, slow_;
};

}  // namespace mutab
