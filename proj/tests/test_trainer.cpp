#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>

#include "sigrl/checkpoint.hpp"
#include "sigrl/trainer.hpp"

using namespace sigrl;

namespace {

Dataset small_dataset(std::size_t n = 8, std::uint64_t seed = 3) {
  SynthConfig cfg;
  cfg.classes = 4;
  cfg.patches = 6;
  cfg.dim = 8;
  cfg.raw_dim = 10;
  cfg.samples = n;
  cfg.noise_sigma = 0.05;
  cfg.max_labels = 2;
  cfg.train_fraction = 1.0;
  cfg.val_fraction = 0.0;
  cfg.seed = seed;
  return gen_synthetic(cfg);
}

TrainConfig small_config(std::size_t epochs) {
  TrainConfig cfg;
  cfg.model.k = 3;
  cfg.batch_size = 4;
  cfg.epochs = epochs;
  cfg.seed = 1;
  return cfg;
}

std::vector<std::uint8_t> encoded_checkpoint() {
  return encode_params(init_params({4, 8, 10}, 5));
}

FormatErrc checkpoint_error(std::span<const std::uint8_t> bytes) {
  try {
    decode_params(bytes);
  } catch (const FormatError& e) {
    return e.code();
  }
  ADD_FAILURE() << "corrupted checkpoint was accepted";
  return FormatErrc::invalid_value;
}

void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) { std::memcpy(b.data() + at, &v, 4); }

}  // namespace

TEST(LrSchedule, CosineEndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(lr_schedule(0, 100, 1e-4, 1e-7), 1e-4);
  EXPECT_NEAR(lr_schedule(100, 100, 1e-4, 1e-7), 1e-7, 1e-20);
  EXPECT_NEAR(lr_schedule(50, 100, 1e-4, 1e-7), 0.5 * (1e-4 + 1e-7), 1e-18);
  EXPECT_NEAR(lr_schedule(25, 100, 1.0, 0.0), 0.5 * (1 + std::cos(std::numbers::pi / 4)), 1e-15);
  double prev = 1.0;
  for (std::size_t t = 0; t <= 100; ++t) {
    const double lr = lr_schedule(t, 100, 1e-4, 1e-7);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_EQ(lr_schedule(0, 0, 1e-4, 1e-7), 1e-4);
  EXPECT_THROW(lr_schedule(101, 100, 1e-4, 1e-7), ValueError);
}

TEST(AdamW, ZeroGradientAndNoDecayLeaveParametersUnchanged) {
  ModelParams p = init_params({4, 8, 10}, 1);
  const ModelParams before = p;
  const ModelParams zero = transform<Tensor>(p, [](const Tensor& t) { return Tensor(t.shape()); });
  AdamWConfig hp;
  hp.weight_decay = 0.0;
  OptimState st;
  adamw_step(p, zero, st, hp, 1e-3);
  p.visit([&](const std::string&, const Tensor& t) { EXPECT_TRUE(t.all_finite()); });
  EXPECT_EQ(encode_params(p), encode_params(before));
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  std::vector<double> p = {1.0}, g = {1.0}, m = {0.0}, v = {0.0};
  AdamWConfig hp;
  hp.weight_decay = 0.0;
  adamw_update(p, g, m, v, 1, 0.1, hp);
  // Bias-corrected moments are g and g^2, so the step is lr * g / (|g| + eps).
  EXPECT_NEAR(p[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p[0], 0.9, 1e-8);
}

TEST(AdamW, DecoupledDecayScalesByOneMinusLrWd) {
  std::vector<double> p = {2.0, -3.0}, g = {0.0, 0.0}, m = {0.0, 0.0}, v = {0.0, 0.0};
  AdamWConfig hp;
  hp.weight_decay = 0.05;
  adamw_update(p, g, m, v, 1, 0.01, hp);
  EXPECT_DOUBLE_EQ(p[0], 2.0 * (1.0 - 0.01 * 0.05));
  EXPECT_DOUBLE_EQ(p[1], -3.0 * (1.0 - 0.01 * 0.05));
}

TEST(AdamW, NonFiniteGradientNamesGroup) {
  ModelParams p = init_params({4, 8, 10}, 1);
  ModelParams g = transform<Tensor>(p, [](const Tensor& t) { return Tensor(t.shape()); });
  g.sda.feat.bias[2] = std::nan("");
  OptimState st;
  try {
    adamw_step(p, g, st, AdamWConfig{}, 1e-3);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("sda.feat.bias"), std::string::npos) << e.what();
  }
}

TEST(AdamW, ConfigValidation) {
  AdamWConfig hp;
  hp.min_lr = 1.0;
  EXPECT_THROW(hp.validate(), ValueError);
  hp = AdamWConfig{};
  hp.beta2 = 1.0;
  EXPECT_THROW(hp.validate(), ValueError);
}

TEST(Model, ForwardShapeAndZeroAdapter) {
  const Dataset ds = small_dataset();
  ModelConfig mc;
  mc.k = 3;
  ModelParams p = init_params({4, 8, 10}, 2);
  EXPECT_EQ(forward_sample(p, ds.samples[0], ds.label_space, mc).shape(), (Shape{4}));
  for (Tensor* t : {&p.adapter.cls.weight, &p.adapter.cls.bias, &p.adapter.patch.weight, &p.adapter.patch.bias})
    *t = Tensor(t->shape());
  const Tensor scores = forward_sample(p, ds.samples[0], ds.label_space, mc);
  for (double v : scores.values()) EXPECT_EQ(v, 0.0);
}

TEST(Model, OracleScoresAreDotWithTeacher) {
  SynthConfig cfg;
  cfg.samples = 4;
  cfg.seed = 8;
  const Dataset ds = gen_synthetic(cfg);
  const ModelParams p = oracle_params(synthetic_projection(cfg.seed, cfg.dim, cfg.raw_dim), 1);
  ModelConfig mc;
  for (const Sample& s : ds.samples) {
    const Tensor sc = forward_sample(p, s, ds.label_space, mc);
    for (std::size_t i = 0; i < ds.num_classes(); ++i) {
      double dot = 0;
      for (std::size_t a = 0; a < cfg.dim; ++a) dot += ds.label_space.embeddings.at(i, a) * s.teacher_class[a];
      EXPECT_NEAR(sc[i], dot, 1e-12);
    }
  }
}

TEST(Model, CompatibilityChecks) {
  const Dataset ds = small_dataset();
  ModelConfig mc;
  mc.k = 7;
  EXPECT_THROW(check_compatible(init_params({4, 8, 10}, 1), ds, mc), ValueError);
  mc.k = 3;
  EXPECT_THROW(check_compatible(init_params({4, 9, 10}, 1), ds, mc), DimensionError);
  EXPECT_NO_THROW(check_compatible(init_params({4, 8, 10}, 1), ds, mc));
}

TEST(Fit, EveryParameterGroupReceivesGradient) {
  const Dataset ds = small_dataset();
  TrainConfig cfg = small_config(1);
  cfg.train_label_embeddings = true;
  ModelParams p = init_params({4, 8, 10}, 9);
  p.label_embeddings = ds.label_space.embeddings;
  const std::vector<std::size_t> batch = {0, 1, 2, 3};
  ModelParams g;
  batch_objective(p, ds, batch, cfg, false, &g);
  g.visit([](const std::string& name, const Tensor& t) { EXPECT_GT(max_abs(t.data()), 0.0) << name; });
}

TEST(Fit, LossDecreasesAndScheduleIsFollowed) {
  const Dataset ds = small_dataset();
  TrainConfig cfg = small_config(20);
  cfg.optim.lr = 1e-2;
  const FitResult r = fit(ds, cfg);
  ASSERT_EQ(r.epochs.size(), 20u);
  EXPECT_LT(r.epochs[1].loss, r.epochs[0].loss);
  EXPECT_LT(r.epochs.back().loss, 0.5 * r.epochs[0].loss);
  const std::size_t steps = 20 * steps_per_epoch(8, 4);
  ASSERT_EQ(r.lr_trace.size(), steps);
  ASSERT_EQ(r.batch_losses.size(), steps);
  for (std::size_t t = 0; t < steps; ++t)
    EXPECT_EQ(r.lr_trace[t], lr_schedule(t, steps - 1, cfg.optim.lr, cfg.optim.min_lr));
  EXPECT_EQ(r.epochs[3].lr, r.lr_trace[3 * steps_per_epoch(8, 4)]);
  EXPECT_EQ(r.best_epoch, 20u);
  EXPECT_FALSE(r.best_val_map);
  EXPECT_EQ(encode_params(r.best_params), encode_params(r.final_params));
}

TEST(Fit, EpochLossIsMeanOverSamples) {
  const Dataset ds = small_dataset(10);
  TrainConfig cfg = small_config(1);
  for (Reduction red : {Reduction::sum, Reduction::mean}) {
    cfg.loss.reduction = red;
    const FitResult r = fit(ds, cfg);
    // Batches of 4, 4 and 2 samples.
    const double scale_last = red == Reduction::mean ? 2.0 : 1.0;
    const double scale_full = red == Reduction::mean ? 4.0 : 1.0;
    const double total =
        scale_full * (r.batch_losses[0] + r.batch_losses[1]) + scale_last * r.batch_losses[2];
    EXPECT_NEAR(r.epochs[0].loss, total / 10.0, 1e-12);
  }
}

TEST(Fit, DeterministicForSeed) {
  const Dataset ds = small_dataset();
  const FitResult a = fit(ds, small_config(3));
  const FitResult b = fit(ds, small_config(3));
  EXPECT_EQ(a.batch_losses, b.batch_losses);
  EXPECT_EQ(encode_params(a.final_params), encode_params(b.final_params));
  TrainConfig other = small_config(3);
  other.seed = 2;
  EXPECT_NE(fit(ds, other).batch_losses, a.batch_losses);
}

TEST(Fit, TracksBestValidationEpoch) {
  SynthConfig sc;
  sc.classes = 4;
  sc.patches = 6;
  sc.dim = 8;
  sc.raw_dim = 10;
  sc.samples = 20;
  sc.max_labels = 3;
  sc.seed = 4;
  const Dataset ds = gen_synthetic(sc);
  std::vector<EpochLog> seen;
  const FitResult r = fit(ds, small_config(4), [&](const EpochLog& l) { seen.push_back(l); });
  ASSERT_EQ(seen.size(), 4u);
  double best = -1;
  std::size_t best_epoch = 0;
  for (const EpochLog& l : seen) {
    ASSERT_TRUE(l.val_map);
    if (*l.val_map > best) {
      best = *l.val_map;
      best_epoch = l.epoch;
    }
  }
  EXPECT_EQ(r.best_epoch, best_epoch);
  EXPECT_EQ(*r.best_val_map, best);
  EXPECT_EQ(evaluate(r.best_params, small_config(1).model, ds, Protocol::gzsl, Split::val).map, best);
}

TEST(Fit, SpmlModesNeedSinglePositiveLabels) {
  const Dataset ds = small_dataset();
  TrainConfig cfg = small_config(1);
  cfg.loss.mode = LossMode::em;
  try {
    fit(ds, cfg);
    FAIL() << "expected ValueError";
  } catch (const ValueError& e) {
    EXPECT_NE(std::string(e.what()).find("img_"), std::string::npos);
  }
  for (LossMode m : {LossMode::iun, LossMode::em, LossMode::em_apl}) {
    cfg.loss.mode = m;
    const FitResult r = fit(apply_spml_mask(ds, 1), cfg);
    for (double l : r.batch_losses) EXPECT_TRUE(std::isfinite(l));
  }
}

TEST(Fit, RejectsInvalidConfig) {
  const Dataset ds = small_dataset();
  TrainConfig cfg = small_config(1);
  cfg.batch_size = 0;
  EXPECT_THROW(fit(ds, cfg), ValueError);
  cfg = small_config(1);
  cfg.model.k = 7;
  EXPECT_THROW(fit(ds, cfg), ValueError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ModelParams p = init_params({4, 8, 10}, 5);
  const auto bytes = encode_params(p);
  EXPECT_EQ(encode_params(decode_params(bytes)), bytes);
  p.label_embeddings = small_dataset().label_space.embeddings;
  const auto with_h = encode_params(p);
  const ModelParams back = decode_params(with_h);
  EXPECT_EQ(back.label_embeddings, p.label_embeddings);
  EXPECT_EQ(encode_params(back), with_h);

  const auto path = std::filesystem::temp_directory_path() / "sigrl_test_ckpt.sigp";
  write_checkpoint(p, path.string());
  EXPECT_EQ(encode_params(read_checkpoint(path.string())), with_h);
  std::filesystem::remove(path);
}

TEST(Checkpoint, Corruptions) {
  const auto good = encoded_checkpoint();
  auto bad = good;
  bad[0] = 'X';
  EXPECT_EQ(checkpoint_error(bad), FormatErrc::bad_magic);
  bad = good;
  put_u32(bad, 4, 2);
  EXPECT_EQ(checkpoint_error(bad), FormatErrc::version_mismatch);
  bad = good;
  bad.resize(bad.size() - 8);
  EXPECT_EQ(checkpoint_error(bad), FormatErrc::truncated);
  bad = good;
  bad.push_back(0);
  EXPECT_EQ(checkpoint_error(bad), FormatErrc::dimension_mismatch);
  // The last block is vfr.recon.weight [8 x 1]; a NaN in its final value.
  bad = good;
  const double nan = std::nan("");
  std::memcpy(bad.data() + bad.size() - 8, &nan, 8);
  EXPECT_EQ(checkpoint_error(bad), FormatErrc::invalid_value);
  // First block header: name length u32 at 12, name at 16, rank after it.
  bad = good;
  const std::string first = "adapter.cls.weight";
  put_u32(bad, 16 + first.size(), 5);
  EXPECT_EQ(checkpoint_error(bad), FormatErrc::dimension_mismatch);
}

TEST(Checkpoint, MissingFileIsAnError) {
  EXPECT_THROW(read_checkpoint("/nonexistent/path/model.sigp"), Error);
}
