#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "sigrl/eval.hpp"

using namespace sigrl;

namespace {

PredictionSet make_pred(Tensor scores, Tensor truth) {
  PredictionSet p;
  const std::size_t c = scores.dim(1);
  p.scores = std::move(scores);
  p.truth = std::move(truth);
  for (std::size_t j = 0; j < c; ++j) {
    p.label_ids.push_back(j);
    p.label_names.push_back("l" + std::to_string(j));
  }
  return p;
}

// AP from its definition, ranking by counting: an item's rank is one plus the
// number of items scored higher, or equal and listed earlier.
double ap_oracle(const std::vector<double>& s, const std::vector<double>& y) {
  const std::size_t n = s.size();
  auto rank = [&](std::size_t i) {
    std::size_t r = 1;
    for (std::size_t j = 0; j < n; ++j)
      if (s[j] > s[i] || (s[j] == s[i] && j < i)) ++r;
    return r;
  };
  double sum = 0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] != 1.0) continue;
    ++positives;
    const std::size_t ri = rank(i);
    std::size_t above = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (y[j] == 1.0 && rank(j) <= ri) ++above;
    sum += static_cast<double>(above) / static_cast<double>(ri);
  }
  return sum / static_cast<double>(positives);
}

PredictionSet random_pred(std::size_t n, std::size_t c, double prevalence, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor s(Shape{n, c}), y(Shape{n, c});
  for (double& v : s.values()) v = u(rng);
  for (double& v : y.values()) v = u(rng) < prevalence ? 1.0 : 0.0;
  for (std::size_t j = 0; j < c; ++j) y.at(j % n, j) = 1.0;
  return make_pred(std::move(s), std::move(y));
}

Dataset synth(std::uint64_t seed, std::size_t n = 64) {
  SynthConfig cfg;
  cfg.samples = n;
  cfg.seed = seed;
  return gen_synthetic(cfg);
}

}  // namespace

TEST(AveragePrecision, WorkedExamples) {
  const std::vector<double> s = {0.9, 0.8, 0.7};
  EXPECT_EQ(average_precision(s, std::vector<double>{1, 1, 0}), 1.0);
  EXPECT_EQ(average_precision(s, std::vector<double>{0, 1, 0}), 0.5);
  EXPECT_NEAR(average_precision(s, std::vector<double>{1, 0, 1}), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_NEAR(average_precision(s, std::vector<double>{0, 0, 1}), 1.0 / 3.0, 1e-15);
  EXPECT_THROW(average_precision(s, std::vector<double>{0, 0, 0}), ValueError);
  EXPECT_THROW(average_precision(s, std::vector<double>{0, 1}), DimensionError);
}

TEST(AveragePrecision, TiesRankEarlierIndexFirst) {
  const std::vector<double> s = {0.5, 0.5};
  EXPECT_EQ(average_precision(s, std::vector<double>{1, 0}), 1.0);
  EXPECT_EQ(average_precision(s, std::vector<double>{0, 1}), 0.5);
}

TEST(AveragePrecision, MatchesDefinitionOracle) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> coarse(0, 5);
  std::bernoulli_distribution pos(0.3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(12), y(12);
    for (auto& v : s) v = coarse(rng) / 5.0;  // plenty of ties
    for (auto& v : y) v = pos(rng) ? 1.0 : 0.0;
    y[trial % 12] = 1.0;
    EXPECT_NEAR(average_precision(s, y), ap_oracle(s, y), 1e-14);
  }
}

TEST(AveragePrecision, InvariantToMonotoneTransforms) {
  const PredictionSet p = random_pred(40, 3, 0.3, 2);
  for (std::size_t j = 0; j < 3; ++j) {
    auto s = detail::column_of(p.scores, j);
    const auto y = detail::column_of(p.truth, j);
    const double ap = average_precision(s, y);
    for (double& v : s) v = std::exp(3.0 * v) - 7.0;
    EXPECT_EQ(average_precision(s, y), ap);
  }
}

TEST(MeanAp, SkipsClassesWithoutPositives) {
  const PredictionSet p = make_pred(Tensor::matrix({{0.9, 0.1, 0.3}, {0.2, 0.8, 0.4}, {0.7, 0.6, 0.5}}),
                                    Tensor::matrix({{1, 0, 0}, {0, 0, 0}, {0, 1, 0}}));
  const auto ap = per_class_ap(p);
  ASSERT_EQ(ap.size(), 3u);
  EXPECT_EQ(*ap[0], 1.0);
  EXPECT_EQ(*ap[1], 0.5);
  EXPECT_FALSE(ap[2]);
  EXPECT_EQ(map_score(p), 0.75);
  const PredictionSet none = make_pred(Tensor(Shape{2, 2}), Tensor(Shape{2, 2}));
  EXPECT_THROW(map_score(none), ValueError);
}

TEST(MeanAp, ValidatesPredictionSet) {
  EXPECT_THROW(map_score(make_pred(Tensor(Shape{2, 2}), Tensor(Shape{2, 3}))), DimensionError);
  EXPECT_THROW(map_score(make_pred(Tensor(Shape{1, 2}), Tensor::matrix({{0.5, 1}}))), ValueError);
  EXPECT_THROW(map_score(make_pred(Tensor::matrix({{NAN, 0}}), Tensor::matrix({{1, 0}}))), NumericError);
}

TEST(MeanAp, RandomScoresApproachPrevalence) {
  for (double prevalence : {0.1, 0.3, 0.5}) {
    const PredictionSet p = random_pred(4000, 6, prevalence, 7);
    double observed = 0;
    for (double v : p.truth.values()) observed += v;
    observed /= static_cast<double>(p.truth.size());
    EXPECT_NEAR(map_score(p), observed, 0.03) << prevalence;
  }
}

TEST(TopK, WorkedExample) {
  const PredictionSet p = make_pred(Tensor::matrix({{0.9, 0.1, 0.5, 0.3}, {0.2, 0.8, 0.6, 0.1}}),
                                    Tensor::matrix({{1, 0, 0, 1}, {0, 1, 1, 1}}));
  const PrecisionRecall r1 = topk_prf(p, 1);
  EXPECT_EQ(r1.precision, 1.0);
  EXPECT_EQ(r1.recall, 2.0 / 5.0);
  const PrecisionRecall r2 = topk_prf(p, 2);
  EXPECT_EQ(r2.precision, 3.0 / 4.0);
  EXPECT_EQ(r2.recall, 3.0 / 5.0);
  EXPECT_NEAR(r2.f1, 2 * 0.75 * 0.6 / 1.35, 1e-15);
  EXPECT_THROW(topk_prf(p, 0), ValueError);
  EXPECT_THROW(topk_prf(p, 5), ValueError);
}

TEST(TopK, MatchesCountingOracleAndIdentity) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const PredictionSet p = random_pred(30, 7, 0.35, 100 + seed);
    std::size_t positives = 0;
    for (double v : p.truth.values()) positives += v == 1.0;
    for (std::size_t k = 1; k <= 7; ++k) {
      // A label is in the top k when fewer than k labels outrank it.
      std::size_t hits = 0;
      for (std::size_t i = 0; i < 30; ++i)
        for (std::size_t j = 0; j < 7; ++j) {
          std::size_t better = 0;
          for (std::size_t o = 0; o < 7; ++o)
            better += p.scores.at(i, o) > p.scores.at(i, j) || (p.scores.at(i, o) == p.scores.at(i, j) && o < j);
          hits += better < k && p.truth.at(i, j) == 1.0;
        }
      const PrecisionRecall r = topk_prf(p, k);
      EXPECT_EQ(r.precision, static_cast<double>(hits) / static_cast<double>(k * 30));
      EXPECT_EQ(r.recall, static_cast<double>(hits) / static_cast<double>(positives));
      EXPECT_NEAR(r.precision * static_cast<double>(k * 30), r.recall * static_cast<double>(positives), 1e-9);
    }
    EXPECT_EQ(topk_prf(p, 7).recall, 1.0);
  }
}

TEST(Metrics, ReportOmitsKLargerThanLabelCount) {
  const PredictionSet p = random_pred(10, 4, 0.4, 3);
  const std::vector<std::size_t> ks = {3, 5};
  const MetricsReport rep = compute_metrics(p, Protocol::zsl, ks);
  ASSERT_EQ(rep.topk.size(), 1u);
  EXPECT_EQ(rep.topk[0].k, 3u);
  EXPECT_EQ(rep.protocol, Protocol::zsl);
  EXPECT_EQ(rep.num_samples, 10u);
  EXPECT_EQ(rep.label_names.size(), 4u);
  EXPECT_EQ(rep.map, map_score(p));
}

TEST(Metrics, RestrictLabelsSelectsColumns) {
  const PredictionSet p = random_pred(6, 5, 0.5, 4);
  const PredictionSet r = restrict_labels(p, {4, 1});
  ASSERT_EQ(r.num_labels(), 2u);
  EXPECT_EQ(r.label_ids, (std::vector<std::size_t>{4, 1}));
  EXPECT_EQ(r.label_names, (std::vector<std::string>{"l4", "l1"}));
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(r.scores.at(i, 0), p.scores.at(i, 4));
    EXPECT_EQ(r.truth.at(i, 1), p.truth.at(i, 1));
  }
  EXPECT_THROW(restrict_labels(p, {5}), ValueError);
}

TEST(Evaluate, OracleModelIsPerfectUnderBothProtocols) {
  const Dataset base = synth(11, 128);
  const ZslSplit z = split_zsl(base, {6, 7});
  const ModelParams oracle = oracle_params(synthetic_projection(11, 32, 48), 1);
  const ModelConfig mc;
  const MetricsReport g = evaluate(oracle, mc, z.train, Protocol::gzsl);
  const MetricsReport s = evaluate(oracle, mc, z.train, Protocol::zsl);
  EXPECT_NEAR(g.map, 1.0, 1e-12);
  EXPECT_NEAR(s.map, 1.0, 1e-12);
  EXPECT_EQ(s.label_names, (std::vector<std::string>{"class_06", "class_07"}));
  EXPECT_EQ(g.label_names.size(), 8u);
  ASSERT_EQ(s.topk.size(), 0u);
  ASSERT_EQ(g.topk.size(), 2u);
}

TEST(Evaluate, ZslIsTheGzslRestriction) {
  const Dataset base = synth(12);
  const ZslSplit z = split_zsl(base, {2, 5});
  const ModelParams params = init_params({8, 32, 48}, 3);
  const ModelConfig mc;
  const PredictionSet full = predict(params, mc, z.train, Split::test);
  const PredictionSet unseen = restrict_labels(full, z.zsl_labels);
  EXPECT_EQ(evaluate(params, mc, z.train, Protocol::zsl).map, map_score(unseen));
  EXPECT_EQ(evaluate(params, mc, z.train, Protocol::gzsl).map, map_score(full));
  // Per-label scores do not depend on which labels are evaluated.
  for (std::size_t i = 0; i < full.num_samples(); ++i) {
    EXPECT_EQ(unseen.scores.at(i, 0), full.scores.at(i, 2));
    EXPECT_EQ(unseen.scores.at(i, 1), full.scores.at(i, 5));
  }
}

TEST(Evaluate, TruthComesFromTestAnnotations) {
  const Dataset ds = synth(13);
  const PredictionSet p = predict(init_params({8, 32, 48}, 1), ModelConfig{}, ds, Split::test);
  const auto idx = ds.indices(Split::test);
  ASSERT_EQ(p.num_samples(), idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_EQ(p.truth.at(i, j), ds.samples[idx[i]].labels[j] == 1 ? 1.0 : 0.0);
}

TEST(Evaluate, ErrorsAndDeterminism) {
  Dataset ds = synth(14);
  const ModelParams params = init_params({8, 32, 48}, 2);
  EXPECT_THROW(evaluate(params, ModelConfig{}, ds, Protocol::zsl), ValueError);
  const MetricsReport a = evaluate(params, ModelConfig{}, ds, Protocol::gzsl);
  const MetricsReport b = evaluate(params, ModelConfig{}, ds, Protocol::gzsl);
  EXPECT_EQ(a, b);
  std::vector<Sample> keep;
  for (Sample& s : ds.samples)
    if (s.split != Split::test) keep.push_back(s);
  ds.samples = keep;
  EXPECT_THROW(evaluate(params, ModelConfig{}, ds, Protocol::gzsl), ValueError);
  EXPECT_THROW(evaluate(init_params({8, 16, 48}, 2), ModelConfig{}, synth(14), Protocol::gzsl), DimensionError);
}
