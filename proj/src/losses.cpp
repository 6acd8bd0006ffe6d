#include "mutab/losses.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mutab {

namespace {

constexpr double kClampEps = 1e-12;
std::atomic<std::uint64_t> g_kl_clamps{0};

double logsumexp_row(const double* row, std::size_t v) {
  double mx = row[0];
  for (std::size_t i = 1; i < v; ++i) mx = std::max(mx, row[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < v; ++i) s += std::exp(row[i] - mx);
  return mx + std::log(s);
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {w_html, w_cell, w_bbox, w_kl}) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw std::invalid_argument("loss weights must be finite and nonnegative");
    }
  }
}

std::uint64_t kl_clamp_count() { return g_kl_clamps.load(); }
void kl_clamp_reset() { g_kl_clamps.store(0); }

Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& targets, int pad_id) {
  if (logits.rank() != 2 || logits.size(0) != targets.size()) {
    throw std::invalid_argument("cross_entropy: logits " + shape_str(logits.shape()) +
                                " do not match " + std::to_string(targets.size()) + " targets");
  }
  std::size_t l = logits.size(0), v = logits.size(1);
  std::size_t n = 0;
  for (int t : targets) {
    if (t != pad_id && (t < 0 || static_cast<std::size_t>(t) >= v)) {
      throw std::invalid_argument("cross_entropy: target id out of range");
    }
    if (t != pad_id) ++n;
  }
  if (n == 0) throw std::invalid_argument("cross_entropy: all positions are padding");

  const auto& lv = logits.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < l; ++i) {
    if (targets[i] == pad_id) continue;
    const double* row = lv.data() + i * v;
    loss += logsumexp_row(row, v) - row[static_cast<std::size_t>(targets[i])];
  }
  loss /= static_cast<double>(n);

  Tensor out = Tensor::scalar(loss);
  auto pl = logits.impl();
  auto tgt = std::make_shared<std::vector<int>>(targets);
  if (grad_enabled() && logits.requires_grad()) {
    auto d = out.impl();
    d->requires_grad = true;
    d->node = std::make_unique<GraphNode>();
    d->node->op = "cross_entropy_masked";
    d->node->parents = {pl};
    double inv_n = 1.0 / static_cast<double>(n);
    d->node->backward = [pl, tgt, pad_id, l, v, inv_n](TensorData& self) {
      ensure_grad(*pl);
      double g = self.grad[0] * inv_n;
      for (std::size_t i = 0; i < l; ++i) {
        if ((*tgt)[i] == pad_id) continue;
        const double* row = pl->data.data() + i * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
        double* grow = pl->grad.data() + i * v;
        for (std::size_t j = 0; j < v; ++j) grow[j] += g * std::exp(row[j] - mx) / denom;
        grow[static_cast<std::size_t>((*tgt)[i])] -= g;
      }
    };
  }
  return out;
}

Tensor kl_divergence(const Tensor& q_teacher, const Tensor& q_student,
                     const std::vector<std::uint8_t>& mask) {
  if (q_teacher.shape() != q_student.shape() || q_teacher.rank() != 2) {
    throw std::invalid_argument("kl_divergence: distributions must share a [N x V] shape");
  }
  std::size_t n = q_teacher.size(0), v = q_teacher.size(1);
  if (!mask.empty() && mask.size() != n) {
    throw std::invalid_argument("kl_divergence: mask length mismatch");
  }
  std::size_t active = 0;
  for (std::size_t i = 0; i < n; ++i) active += (mask.empty() || mask[i]) ? 1 : 0;
  if (active == 0) return Tensor::scalar(0.0);

  const auto& qt = q_teacher.data();
  const auto& qs = q_student.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    for (std::size_t j = 0; j < v; ++j) {
      double t = qt[i * v + j];
      if (t <= 0.0) continue;  // 0 log(0/x) = 0
      double s = qs[i * v + j];
      if (s < kClampEps) {
        s = kClampEps;
        g_kl_clamps.fetch_add(1);
      }
      loss += t * (std::log(t) - std::log(s));
    }
  }
  loss /= static_cast<double>(active);

  Tensor out = Tensor::scalar(loss);
  // the teacher is a constant by contract: only the student receives gradient
  if (grad_enabled() && q_student.requires_grad()) {
    auto ps = q_student.impl();
    auto teacher = std::make_shared<std::vector<double>>(qt);
    auto msk = std::make_shared<std::vector<std::uint8_t>>(mask);
    auto d = out.impl();
    d->requires_grad = true;
    d->node = std::make_unique<GraphNode>();
    d->node->op = "kl_divergence";
    d->node->parents = {ps};
    double inv_n = 1.0 / static_cast<double>(active);
    d->node->backward = [ps, teacher, msk, n, v, inv_n](TensorData& self) {
      ensure_grad(*ps);
      double g = self.grad[0] * inv_n;
      for (std::size_t i = 0; i < n; ++i) {
        if (!msk->empty() && !(*msk)[i]) continue;
        for (std::size_t j = 0; j < v; ++j) {
          double t = (*teacher)[i * v + j];
          if (t <= 0.0) continue;
          double s = ps->data[i * v + j];
          if (s < kClampEps) continue;  // flat inside the clamp
          ps->grad[i * v + j] -= g * t / s;
        }
      }
    };
  }
  return out;
}

std::vector<int> mirror_targets(const std::vector<int>& targets, int pad_id, int eos_id) {
  std::size_t end = targets.size();
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == eos_id || targets[i] == pad_id) {
      end = i;
      break;
    }
  }
  std::vector<int> out = targets;
  std::reverse(out.begin(), out.begin() + static_cast<long>(end));
  return out;
}

BmlResult bml_loss(const Tensor& logits_ltor, const Tensor& logits_rtol,
                   const std::vector<int>& targets_ltor, int pad_id, double w_kl, int eos_id) {
  if (logits_ltor.shape() != logits_rtol.shape()) {
    throw std::invalid_argument("bml_loss: direction logits differ in shape, " +
                                shape_str(logits_ltor.shape()) + " vs " +
                                shape_str(logits_rtol.shape()));
  }
  if (logits_ltor.size(0) != targets_ltor.size()) {
    throw std::invalid_argument("bml_loss: logits/target length mismatch after mirroring");
  }

  std::vector<int> targets_rtol = mirror_targets(targets_ltor, pad_id, eos_id);

  BmlResult r;
  Tensor ce_l = cross_entropy_masked(logits_ltor, targets_ltor, pad_id);
  Tensor ce_r = cross_entropy_masked(logits_rtol, targets_rtol, pad_id);
  r.ce_ltor = ce_l.value();
  r.ce_rtol = ce_r.value();
  r.total = add(ce_l, ce_r);

  if (w_kl > 0.0) {
    // real-token span: positions before the first EOS/pad
    std::size_t n_real = targets_ltor.size();
    for (std::size_t i = 0; i < targets_ltor.size(); ++i) {
      if (targets_ltor[i] == eos_id || targets_ltor[i] == pad_id) {
        n_real = i;
        break;
      }
    }
    if (n_real > 0) {
      std::vector<int> idx_l(n_real), idx_r(n_real);
      for (std::size_t i = 0; i < n_real; ++i) {
        idx_l[i] = static_cast<int>(i);
        idx_r[i] = static_cast<int>(n_real - 1 - i);  // mirror map n <-> N-n+1
      }
      Tensor q_l = embedding(softmax(logits_ltor, 1), idx_l);
      Tensor q_r = embedding(softmax(logits_rtol, 1), idx_r);
      Tensor kl_rl = kl_divergence(q_r.detach(), q_l);
      Tensor kl_lr = kl_divergence(q_l.detach(), q_r);
      r.kl_rtol_to_ltor = kl_rl.value();
      r.kl_ltor_to_rtol = kl_lr.value();
      r.total = add(r.total, scale(add(kl_rl, kl_lr), w_kl));
    }
  }
  return r;
}

Tensor bbox_loss(const Tensor& bbox_pred, const Tensor& bbox_gt,
                 const std::vector<std::uint8_t>& cell_mask) {
  if (bbox_pred.shape() != bbox_gt.shape() || bbox_pred.rank() != 2 || bbox_pred.size(1) != 4) {
    throw std::invalid_argument("bbox_loss: predictions and targets must both be [L x 4]");
  }
  if (cell_mask.size() != bbox_pred.size(0)) {
    throw std::invalid_argument("bbox_loss: mask length mismatch");
  }
  std::size_t cnt = 0;
  for (auto m : cell_mask) cnt += m ? 1 : 0;
  if (cnt == 0) return Tensor::scalar(0.0);

  Tensor mask_t = Tensor::zeros(bbox_pred.shape());
  for (std::size_t i = 0; i < cell_mask.size(); ++i) {
    if (!cell_mask[i]) continue;
    for (std::size_t j = 0; j < 4; ++j) mask_t.data()[i * 4 + j] = 1.0;
  }
  Tensor diff = absolute(sub(bbox_pred, bbox_gt));
  return scale(sum(mul(diff, mask_t)), 1.0 / (4.0 * static_cast<double>(cnt)));
}

Tensor total_loss(const LossParts& parts, const LossWeights& weights) {
  weights.validate();
  auto check = [](const Tensor& t, const char* name) {
    if (t.defined() && !std::isfinite(t.value())) {
      throw std::runtime_error(std::string("non-finite ") + name + " loss component");
    }
  };
  check(parts.html, "html");
  check(parts.cell, "cell");
  check(parts.bbox, "bbox");
  if (!parts.html.defined()) throw std::invalid_argument("total_loss: html component is required");

  Tensor total = scale(parts.html, weights.w_html);
  if (parts.cell.defined()) total = add(total, scale(parts.cell, weights.w_cell));
  if (parts.bbox.defined()) total = add(total, scale(parts.bbox, weights.w_bbox));
  return total;
}

int ScheduleSpec::total_epochs() const {
  int n = 0;
  for (const auto& p : phases) n += p.epochs;
  return n;
}

void ScheduleSpec::validate() const {
  if (phases.empty()) throw std::invalid_argument("schedule: at least one phase required");
  double prev = std::numeric_limits<double>::infinity();
  for (const auto& p : phases) {
    if (p.epochs < 1) throw std::invalid_argument("schedule: phase epochs must be >= 1");
    if (!(p.lr > 0.0)) throw std::invalid_argument("schedule: rates must be positive");
    if (p.lr > prev) throw std::invalid_argument("schedule: rates must be nonincreasing");
    prev = p.lr;
  }
}

double lr_schedule(int epoch, const ScheduleSpec& spec) {
  spec.validate();
  if (epoch < 0) throw std::invalid_argument("schedule: epoch must be >= 0");
  int boundary = 0;
  for (const auto& p : spec.phases) {
    boundary += p.epochs;
    if (epoch < boundary) return p.lr;
  }
  return spec.phases.back().lr;
}

ScheduleSpec scale_schedule(const ScheduleSpec& spec, int total_epochs) {
  spec.validate();
  if (total_epochs < static_cast<int>(spec.phases.size())) {
    // too few epochs to honor every phase: single phase at the initial rate
    return ScheduleSpec{{{std::max(1, total_epochs), spec.phases.front().lr}}};
  }
  ScheduleSpec out;
  out.phases.clear();
  int base = spec.total_epochs();
  int assigned = 0;
  for (const auto& p : spec.phases) {
    int e = std::max(1, static_cast<int>(std::llround(
                            static_cast<double>(p.epochs) * total_epochs / base)));
    out.phases.push_back({e, p.lr});
    assigned += e;
  }
  out.phases.front().epochs += total_epochs - assigned;  // absorb rounding drift
  if (out.phases.front().epochs < 1) {
    // drift pushed the first phase below one epoch; rebalance from the largest
    int deficit = 1 - out.phases.front().epochs;
    out.phases.front().epochs = 1;
    for (auto it = out.phases.rbegin(); it != out.phases.rend() && deficit > 0; ++it) {
      int take = std::min(deficit, it->epochs - 1);
      it->epochs -= take;
      deficit -= take;
    }
  }
  return out;
}

Optimizer::Optimizer(ParamRegistry& params, OptimizerConfig cfg) : params_(params), cfg_(cfg) {
  m_.reserve(params_.items.size());
  for (auto& [name, t] : params_.items) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
    if (cfg_.lookahead) slow_.emplace_back(t.data());
  }
}

void Optimizer::step(double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (std::size_t p = 0; p < params_.items.size(); ++p) {
    auto& [name, tensor] = params_.items[p];
    auto& data = tensor.data();
    const auto& grad = tensor.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      double g = grad[i];
      if (std::isnan(g)) {
        throw std::runtime_error("NaN gradient in parameter '" + name + "'");
      }
      m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * g;
      v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * g * g;
      double mhat = m_[p][i] / bc1;
      double vhat = v_[p][i] / bc2;
      data[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
  if (cfg_.lookahead && t_ % cfg_.lookahead_k == 0) {
    for (std::size_t p = 0; p < params_.items.size(); ++p) {
      auto& data = params_.items[p].second.data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        slow_[p][i] += cfg_.lookahead_alpha * (data[i] - slow_[p][i]);
        data[i] = slow_[p][i];
      }
    }
  }
}

}  // namespace mutab
