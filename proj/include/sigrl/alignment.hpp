#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sigrl/autodiff.hpp"

namespace sigrl {

enum class LossMode { ranking_distill, iun, em, em_apl };

inline const char* to_string(LossMode m) {
  switch (m) {
    case LossMode::ranking_distill: return "ranking";
    case LossMode::iun: return "iun";
    case LossMode::em: return "em";
    case LossMode::em_apl: return "em_apl";
  }
  return "?";
}

enum class Reduction { sum, mean };

struct LossConfig {
  LossMode mode = LossMode::ranking_distill;
  double alpha_em = 0.1;
  double theta_pos = 0.95;
  double theta_neg = 0.05;
  double temperature = 1.0;
  double apl_pos_weight = 1.0;
  double apl_neg_weight = 1.0;
  std::size_t apl_warmup_epochs = 1;
  // Count unannotated (0) labels as negatives in the ranking loss.
  bool assume_negative = false;
  Reduction reduction = Reduction::sum;

  void validate() const {
    if (!(alpha_em >= 0.0)) throw ValueError("alpha_em must be >= 0");
    if (!(0.0 <= theta_neg && theta_neg <= theta_pos && theta_pos <= 1.0)) {
      throw ValueError("pseudo-label thresholds must satisfy 0 <= theta_neg <= theta_pos <= 1");
    }
    if (!(temperature > 0.0)) throw ValueError("temperature must be > 0");
    if (!(apl_pos_weight >= 0.0 && apl_neg_weight >= 0.0)) throw ValueError("APL weights must be >= 0");
  }
};

/// s_i = <h_i, F_class> + mean of the k largest <h_i, M_hat[p]>.
inline Var score(const Var& labels, const Var& f_class, const Var& reconstructed, std::size_t k) {
  const Tensor& h = labels.value();
  if (h.rank() != 2 || f_class.value().shape() != Shape{h.dim(1)} ||
      reconstructed.value().rank() != 2 || reconstructed.value().dim(1) != h.dim(1)) {
    throw DimensionError("score: labels " + shape_str(h.shape()) + ", class token " +
                         shape_str(f_class.value().shape()) + ", patches " +
                         shape_str(reconstructed.value().shape()) + " disagree");
  }
  const std::size_t c = h.dim(0), d = h.dim(1);
  const Var global = reshape(matmul(labels, reshape(f_class, {d, 1})), {c});
  const Var local = topk_mean_rows(matmul(labels, transpose(reconstructed)), k);
  return add(global, local);
}

/// Sum over (positive, negative) pairs of max(1 + s_n - s_p, 0) for one
/// sample. Only explicit -1 labels are negatives unless `assume_negative`.
/// A sample without positives or negatives contributes 0.
inline Var rank_loss(const Var& scores, std::span<const std::int8_t> labels, bool assume_negative = false) {
  if (scores.value().shape() != Shape{labels.size()}) {
    throw DimensionError("rank_loss: scores " + shape_str(scores.value().shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  std::vector<std::size_t> pos, negs;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) pos.push_back(i);
    else if (labels[i] == -1 || (assume_negative && labels[i] == 0)) negs.push_back(i);
  }
  if (pos.empty() || negs.empty()) return scores.tape().constant(Tensor::scalar(0.0));
  const Var margins = outer_add(neg(gather(scores, std::move(pos))), gather(scores, std::move(negs)));
  return sum(relu_op(add_scalar(margins, 1.0)));
}

/// ||teacher - F_class||_1.
inline Var distill_loss(const Var& teacher, const Var& f_class) { return l1_distance(teacher, f_class); }

/// Throws unless `labels` holds exactly one +1 and zeros elsewhere.
inline void check_single_positive(std::span<const std::int8_t> labels) {
  std::size_t pos = 0;
  for (std::int8_t y : labels) {
    if (y == 1) ++pos;
    else if (y != 0) throw ValueError("SPML loss needs labels in {0, +1}; found " + std::to_string(y));
  }
  if (pos != 1) throw ValueError("SPML loss needs exactly one positive label, found " + std::to_string(pos));
}

/// Single-positive losses on probabilities p = sigmoid(s / temperature).
///   iun:    -log p_pos - 1/(C-1) sum_unobserved log(1 - p)
///   em:     -log p_pos + alpha sum_unobserved (p log p + (1-p) log(1-p))
///   em_apl: em, where once `pseudo_labels` is set unobserved labels with
///           p >= theta_pos join the positive term and p <= theta_neg the
///           negative term instead of the entropy term.
inline Var spml_loss(const Var& scores, std::span<const std::int8_t> labels, const LossConfig& cfg,
                     bool pseudo_labels = false) {
  if (cfg.mode == LossMode::ranking_distill) throw ValueError("spml_loss called with the ranking loss mode");
  if (scores.value().shape() != Shape{labels.size()}) {
    throw DimensionError("spml_loss: scores " + shape_str(scores.value().shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  check_single_positive(labels);
  const std::size_t c = labels.size();
  Tape& t = scores.tape();
  const Var z = scale(scores, 1.0 / cfg.temperature);
  const Var p = sigmoid_op(z);
  const Var q = sigmoid_op(neg(z));  // 1 - p without cancellation
  const Var log_p = log_guarded(p);
  const Var log_q = log_guarded(q);

  Tensor w_pos(Shape{c}), w_neg(Shape{c}), w_ent(Shape{c});
  for (std::size_t i = 0; i < c; ++i) {
    if (labels[i] == 1) {
      w_pos[i] = 1.0;
      continue;
    }
    switch (cfg.mode) {
      case LossMode::iun: w_neg[i] = 1.0 / static_cast<double>(c - 1); break;
      case LossMode::em: w_ent[i] = cfg.alpha_em; break;
      case LossMode::em_apl: {
        const double pi = p.value()[i];
        if (pseudo_labels && pi >= cfg.theta_pos) w_pos[i] = cfg.apl_pos_weight;
        else if (pseudo_labels && pi <= cfg.theta_neg) w_neg[i] = cfg.apl_neg_weight;
        else w_ent[i] = cfg.alpha_em;
        break;
      }
      case LossMode::ranking_distill: break;
    }
  }
  const Var pos_term = sum(hadamard(t.constant(std::move(w_pos)), log_p));
  const Var neg_term = sum(hadamard(t.constant(std::move(w_neg)), log_q));
  const Var neg_entropy = add(hadamard(p, log_p), hadamard(q, log_q));
  const Var ent_term = sum(hadamard(t.constant(std::move(w_ent)), neg_entropy));
  return add(neg(add(pos_term, neg_term)), ent_term);
}

/// Sum over unobserved labels of p log p + (1-p) log(1-p): the quantity the
/// entropy-maximizing losses drive toward its minimum -(C-1) ln 2.
inline double unobserved_neg_entropy(std::span<const double> probs, std::span<const std::int8_t> labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (labels[i] != 0) continue;
    const double pi = probs[i], qi = 1.0 - probs[i];
    if (pi > 0) s += pi * std::log(pi);
    if (qi > 0) s += qi * std::log(qi);
  }
  return s;
}

/// Per-sample inputs of the batch objective.
struct LossInput {
  Var scores;
  Var f_class;
  Var teacher;
  std::span<const std::int8_t> labels;
};

/// Batch objective. In ranking mode this is L_local + L_global; in the SPML
/// modes the SPML loss replaces the ranking term and L_global is kept.
inline Var total_loss(std::span<const LossInput> batch, const LossConfig& cfg, bool pseudo_labels = false) {
  if (batch.empty()) throw ValueError("total_loss of an empty batch");
  cfg.validate();
  Var total;
  for (const LossInput& in : batch) {
    const Var local = cfg.mode == LossMode::ranking_distill ? rank_loss(in.scores, in.labels, cfg.assume_negative)
                                                            : spml_loss(in.scores, in.labels, cfg, pseudo_labels);
    const Var term = add(local, distill_loss(in.teacher, in.f_class));
    total = total.valid() ? add(total, term) : term;
  }
  if (cfg.reduction == Reduction::mean) total = scale(total, 1.0 / static_cast<double>(batch.size()));
  return total;
}

}  // namespace sigrl
