#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sigrl/feature_io.hpp"
#include "sigrl/model.hpp"

namespace sigrl {

enum class Protocol { zsl, gzsl };

inline const char* to_string(Protocol p) { return p == Protocol::zsl ? "zsl" : "gzsl"; }

/// Scores and binary ground truth for the evaluated label subset.
struct PredictionSet {
  Tensor scores;  // [N x C_eval]
  Tensor truth;   // [N x C_eval], entries in {0, 1}
  std::vector<std::size_t> label_ids;
  std::vector<std::string> label_names;

  std::size_t num_samples() const { return scores.rank() == 2 ? scores.dim(0) : 0; }
  std::size_t num_labels() const { return scores.rank() == 2 ? scores.dim(1) : 0; }

  void validate() const {
    if (scores.rank() != 2 || scores.shape() != truth.shape()) {
      throw DimensionError("prediction scores " + shape_str(scores.shape()) + " and truth " +
                           shape_str(truth.shape()) + " disagree");
    }
    for (double t : truth.values())
      if (t != 0.0 && t != 1.0) throw ValueError("ground truth must be binary");
    if (!scores.all_finite()) throw NumericError("prediction scores contain non-finite values");
  }
};

/// Non-interpolated AP: the mean, over positives in descending-score order,
/// of precision at each positive's rank. Ties rank the lower index first.
inline double average_precision(std::span<const double> scores, std::span<const double> truth) {
  if (scores.size() != truth.size()) throw DimensionError("average_precision: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (truth[order[r]] != 1.0) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  if (hits == 0) throw ValueError("average_precision: no positives");
  return sum / static_cast<double>(hits);
}

namespace detail {

inline std::vector<double> column_of(const Tensor& t, std::size_t j) {
  std::vector<double> out(t.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.at(i, j);
  return out;
}

}  // namespace detail

/// AP per evaluated class; classes without positives are std::nullopt.
inline std::vector<std::optional<double>> per_class_ap(const PredictionSet& pred) {
  pred.validate();
  std::vector<std::optional<double>> out(pred.num_labels());
  for (std::size_t j = 0; j < out.size(); ++j) {
    const auto t = detail::column_of(pred.truth, j);
    if (std::find(t.begin(), t.end(), 1.0) == t.end()) continue;
    out[j] = average_precision(detail::column_of(pred.scores, j), t);
  }
  return out;
}

/// Macro mean of AP over classes with at least one positive.
inline double map_score(const PredictionSet& pred) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& ap : per_class_ap(pred)) {
    if (!ap) continue;
    sum += *ap;
    ++n;
  }
  if (n == 0) throw ValueError("mAP: no evaluated class has a positive sample");
  return sum / static_cast<double>(n);
}

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Micro-averaged precision/recall of each image's k best labels.
inline PrecisionRecall topk_prf(const PredictionSet& pred, std::size_t k) {
  pred.validate();
  const std::size_t n = pred.num_samples(), c = pred.num_labels();
  if (k < 1 || k > c) throw ValueError("top-k size " + std::to_string(k) + " outside [1, " + std::to_string(c) + "]");
  std::size_t correct = 0, positives = 0;
  std::vector<std::size_t> order(c);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = pred.scores.row(i);
    const auto truth = pred.truth.row(i);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    for (std::size_t q = 0; q < k; ++q) correct += truth[order[q]] == 1.0;
    for (double t : truth) positives += t == 1.0;
  }
  PrecisionRecall r;
  if (n > 0) r.precision = static_cast<double>(correct) / static_cast<double>(k * n);
  if (positives > 0) r.recall = static_cast<double>(correct) / static_cast<double>(positives);
  if (r.precision + r.recall > 0) r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

struct TopKMetrics {
  std::size_t k = 0;
  PrecisionRecall prf;
};

struct MetricsReport {
  Protocol protocol = Protocol::gzsl;
  std::size_t num_samples = 0;
  std::vector<std::string> label_names;
  double map = 0.0;
  std::vector<TopKMetrics> topk;  // only k <= C_eval are reported
  std::vector<std::optional<double>> per_class_ap;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline bool operator==(const TopKMetrics& a, const TopKMetrics& b) {
  return a.k == b.k && a.prf.precision == b.prf.precision && a.prf.recall == b.prf.recall && a.prf.f1 == b.prf.f1;
}

inline MetricsReport compute_metrics(const PredictionSet& pred, Protocol protocol, std::span<const std::size_t> ks) {
  MetricsReport rep;
  rep.protocol = protocol;
  rep.num_samples = pred.num_samples();
  rep.label_names = pred.label_names;
  rep.per_class_ap = per_class_ap(pred);
  rep.map = map_score(pred);
  for (std::size_t k : ks)
    if (k >= 1 && k <= pred.num_labels()) rep.topk.push_back({k, topk_prf(pred, k)});
  return rep;
}

/// Keeps the columns `label_ids` of a full [N x C] prediction set.
inline PredictionSet restrict_labels(const PredictionSet& full, const std::vector<std::size_t>& label_ids) {
  const std::size_t n = full.num_samples();
  PredictionSet out;
  out.scores = Tensor(Shape{n, label_ids.size()});
  out.truth = Tensor(Shape{n, label_ids.size()});
  for (std::size_t q = 0; q < label_ids.size(); ++q) {
    const std::size_t j = label_ids[q];
    if (j >= full.num_labels()) throw ValueError("label id out of range");
    for (std::size_t i = 0; i < n; ++i) {
      out.scores.at(i, q) = full.scores.at(i, j);
      out.truth.at(i, q) = full.truth.at(i, j);
    }
    out.label_ids.push_back(full.label_ids[j]);
    out.label_names.push_back(full.label_names[j]);
  }
  return out;
}

/// Scores every sample of `split` over all classes.
inline PredictionSet predict(const ModelParams& params, const ModelConfig& cfg, const Dataset& ds, Split split) {
  check_compatible(params, ds, cfg);
  const auto idx = ds.indices(split);
  const std::size_t c = ds.num_classes();
  PredictionSet pred;
  pred.scores = Tensor(Shape{idx.size(), c});
  pred.truth = Tensor(Shape{idx.size(), c});
  pred.label_names = ds.label_space.names;
  pred.label_ids.resize(c);
  std::iota(pred.label_ids.begin(), pred.label_ids.end(), std::size_t{0});

  Tape tape;
  const ModelVars vars = bind(tape, params, false);
  const LabelContext ctx = label_context(tape, vars, ds.label_space, cfg);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Sample& s = ds.samples[idx[i]];
    const Tensor scores = forward_on_tape(vars, ctx, s, cfg).scores.value();
    for (std::size_t j = 0; j < c; ++j) {
      pred.scores.at(i, j) = scores[j];
      pred.truth.at(i, j) = s.labels[j] == 1 ? 1.0 : 0.0;
    }
  }
  return pred;
}

/// Label ids evaluated under a protocol: unseen classes for ZSL, all for GZSL.
inline std::vector<std::size_t> protocol_labels(const LabelSpace& ls, Protocol protocol) {
  if (protocol == Protocol::zsl) {
    auto ids = ls.unseen_ids();
    if (ids.empty()) throw ValueError("ZSL evaluation needs at least one unseen label");
    return ids;
  }
  std::vector<std::size_t> ids(ls.num_classes());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return ids;
}

inline const std::vector<std::size_t>& default_ks() {
  static const std::vector<std::size_t> ks = {3, 5};
  return ks;
}

inline MetricsReport evaluate(const ModelParams& params, const ModelConfig& cfg, const Dataset& ds, Protocol protocol,
                              Split split = Split::test, std::span<const std::size_t> ks = default_ks()) {
  if (ds.indices(split).empty()) throw ValueError(std::string("no samples in the ") + to_string(split) + " split");
  const auto labels = protocol_labels(ds.label_space, protocol);
  return compute_metrics(restrict_labels(predict(params, cfg, ds, split), labels), protocol, ks);
}

}  // namespace sigrl
