#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <limits>
#include <numeric>
#include <set>

#include "sigrl/feature_io.hpp"

using namespace sigrl;

namespace {

SynthConfig small_config(std::uint64_t seed = 3) {
  SynthConfig cfg;
  cfg.classes = 5;
  cfg.patches = 4;
  cfg.dim = 6;
  cfg.raw_dim = 7;
  cfg.samples = 3;
  cfg.min_labels = 1;
  cfg.max_labels = 2;
  cfg.noise_sigma = 0.05;
  cfg.seed = seed;
  return cfg;
}

FormatErrc decode_error(std::span<const std::uint8_t> bytes) {
  try {
    decode_dataset(bytes);
  } catch (const FormatError& e) {
    return e.code();
  }
  ADD_FAILURE() << "decode succeeded";
  return FormatErrc::invalid_value;
}

void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(Sigf, RoundTripIsBitExact) {
  const Dataset ds = gen_synthetic(small_config());
  const auto bytes = encode_dataset(ds);
  const Dataset back = decode_dataset(bytes);
  EXPECT_EQ(encode_dataset(back), bytes);
  ASSERT_EQ(back.samples.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.samples[i].raw_patch, ds.samples[i].raw_patch);
    EXPECT_EQ(back.samples[i].teacher_class, ds.samples[i].teacher_class);
    EXPECT_EQ(back.samples[i].labels, ds.samples[i].labels);
    EXPECT_EQ(back.samples[i].split, ds.samples[i].split);
  }
  EXPECT_EQ(back.label_space.names, ds.label_space.names);
  EXPECT_EQ(back.label_space.embeddings, ds.label_space.embeddings);
}

TEST(Sigf, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "sigrl_feature_io_test.sigf").string();
  Dataset ds = gen_synthetic(small_config());
  ds.label_space.seen[2] = false;
  write_dataset(ds, path);
  const Dataset back = read_dataset(path);
  EXPECT_EQ(back.label_space.seen, ds.label_space.seen);
  EXPECT_EQ(encode_dataset(back), encode_dataset(ds));
  std::filesystem::remove(path);
  EXPECT_THROW(read_dataset(path), Error);
}

TEST(Sigf, BadMagic) {
  auto bytes = encode_dataset(gen_synthetic(small_config()));
  bytes[1] = 'X';
  EXPECT_EQ(decode_error(bytes), FormatErrc::bad_magic);
  EXPECT_EQ(decode_error(std::vector<std::uint8_t>{'S', 'I'}), FormatErrc::bad_magic);
}

TEST(Sigf, VersionMismatchNamesOffset) {
  auto bytes = encode_dataset(gen_synthetic(small_config()));
  put_u32(bytes, 4, 2);
  try {
    decode_dataset(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.code(), FormatErrc::version_mismatch);
    EXPECT_EQ(e.offset(), 4u);
    EXPECT_NE(std::string(e.what()).find("byte 4"), std::string::npos);
  }
}

TEST(Sigf, MissingPatchRowIsTruncation) {
  // Header says P=4; drop one patch row (D_raw doubles) from the last record.
  SynthConfig cfg = small_config();
  const Dataset ds = gen_synthetic(cfg);
  auto bytes = encode_dataset(ds);
  bytes.resize(bytes.size() - cfg.raw_dim * 8);
  EXPECT_EQ(decode_error(bytes), FormatErrc::truncated);
}

TEST(Sigf, HeaderDimensionDisagreeingWithPayload) {
  auto bytes = encode_dataset(gen_synthetic(small_config()));
  put_u32(bytes, 8 + 4 * 4, 2);  // N: 3 -> 2 leaves a whole record unaccounted for
  EXPECT_EQ(decode_error(bytes), FormatErrc::dimension_mismatch);
  put_u32(bytes, 8 + 4 * 4, 3);
  put_u32(bytes, 8, 1);  // C below the minimum of 2
  EXPECT_EQ(decode_error(bytes), FormatErrc::dimension_mismatch);
}

TEST(Sigf, LabelOutOfRange) {
  const Dataset ds = gen_synthetic(small_config());
  auto bytes = encode_dataset(ds);
  // The last record ends with C label bytes and one split byte.
  const std::size_t label_at = bytes.size() - 1 - ds.num_classes();
  bytes[label_at] = 2;
  try {
    decode_dataset(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.code(), FormatErrc::label_out_of_range);
    EXPECT_EQ(e.offset(), label_at);
  }
}

TEST(Sigf, InvalidValues) {
  const Dataset ds = gen_synthetic(small_config());
  auto bytes = encode_dataset(ds);
  bytes.back() = 7;  // split tag
  EXPECT_EQ(decode_error(bytes), FormatErrc::invalid_value);

  auto nan_bytes = encode_dataset(ds);
  // First label-embedding double follows header (28), names, seen mask.
  std::size_t at = 28;
  for (const auto& n : ds.label_space.names) at += 4 + n.size();
  at += ds.num_classes();
  const double bad = std::numeric_limits<double>::quiet_NaN();
  std::memcpy(nan_bytes.data() + at, &bad, 8);
  EXPECT_EQ(decode_error(nan_bytes), FormatErrc::invalid_value);
}

TEST(Sigf, EncoderRejectsInconsistentDataset) {
  Dataset ds = gen_synthetic(small_config());
  ds.samples[1].raw_patch = Tensor(Shape{3, 7});
  EXPECT_THROW(encode_dataset(ds), DimensionError);
  ds = gen_synthetic(small_config());
  ds.label_space.names[1] = ds.label_space.names[0];
  EXPECT_THROW(encode_dataset(ds), ValueError);
}

TEST(SpmlMask, LeavesExactlyOnePositivePerTrainingSample) {
  SynthConfig cfg = small_config();
  cfg.samples = 40;
  cfg.max_labels = 4;
  const Dataset ds = gen_synthetic(cfg);
  const Dataset masked = apply_spml_mask(ds, 11);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& a = ds.samples[i];
    const Sample& b = masked.samples[i];
    if (a.split != Split::train) {
      EXPECT_EQ(a.labels, b.labels);
      continue;
    }
    EXPECT_EQ(b.num_positives(), 1u);
    for (std::size_t j = 0; j < a.labels.size(); ++j) {
      if (b.labels[j] == 1) EXPECT_EQ(a.labels[j], 1);
      else EXPECT_EQ(b.labels[j], 0);
    }
  }
}

TEST(SpmlMask, SeedDeterminesChoice) {
  Dataset ds = gen_synthetic(small_config());
  for (auto& s : ds.samples) {
    s.split = Split::train;
    std::fill(s.labels.begin(), s.labels.end(), std::int8_t{-1});
    s.labels[2] = s.labels[4] = 1;
  }
  const Dataset a = apply_spml_mask(ds, 5), b = apply_spml_mask(ds, 5);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].labels, b.samples[i].labels);
    EXPECT_TRUE(a.samples[i].labels[2] == 1 || a.samples[i].labels[4] == 1);
  }
  // Distinct seeds reach both choices over many draws.
  std::set<std::size_t> kept;
  for (std::uint64_t seed = 0; seed < 32; ++seed) {
    const Dataset m = apply_spml_mask(ds, seed);
    kept.insert(m.samples[0].labels[2] == 1 ? 2 : 4);
  }
  EXPECT_EQ(kept.size(), 2u);
}

TEST(SpmlMask, SinglePositiveIsKept) {
  Dataset ds = gen_synthetic(small_config());
  ds.samples[0].split = Split::train;
  std::fill(ds.samples[0].labels.begin(), ds.samples[0].labels.end(), std::int8_t{-1});
  ds.samples[0].labels[3] = 1;
  const Dataset m = apply_spml_mask(ds, 1);
  EXPECT_EQ(m.samples[0].labels, (std::vector<std::int8_t>{0, 0, 0, 1, 0}));
}

TEST(SpmlMask, SampleWithoutPositiveIsNamed) {
  Dataset ds = gen_synthetic(small_config());
  ds.samples[1].split = Split::train;
  std::fill(ds.samples[1].labels.begin(), ds.samples[1].labels.end(), std::int8_t{-1});
  try {
    apply_spml_mask(ds, 1);
    FAIL();
  } catch (const ValueError& e) {
    EXPECT_NE(std::string(e.what()).find(ds.samples[1].image_id), std::string::npos);
  }
}

TEST(Synthetic, DeterministicGivenSeed) {
  SynthConfig cfg;
  cfg.seed = 7;
  EXPECT_EQ(encode_dataset(gen_synthetic(cfg)), encode_dataset(gen_synthetic(cfg)));
  SynthConfig other = cfg;
  other.seed = 8;
  EXPECT_NE(encode_dataset(gen_synthetic(cfg)), encode_dataset(gen_synthetic(other)));
}

TEST(Synthetic, LabelCountsFollowRange) {
  SynthConfig cfg;
  cfg.min_labels = cfg.max_labels = 2;
  for (const Sample& s : gen_synthetic(cfg).samples) EXPECT_EQ(s.num_positives(), 2u);
  cfg.min_labels = 1;
  cfg.max_labels = 3;
  for (const Sample& s : gen_synthetic(cfg).samples) {
    EXPECT_GE(s.num_positives(), 1u);
    EXPECT_LE(s.num_positives(), 3u);
  }
}

TEST(Synthetic, EmbeddingsAreUnitNormAndOrthogonal) {
  const Dataset ds = gen_synthetic(SynthConfig{});
  const Tensor& h = ds.label_space.embeddings;
  for (std::size_t i = 0; i < ds.num_classes(); ++i)
    for (std::size_t j = 0; j < ds.num_classes(); ++j)
      EXPECT_NEAR(dot(h.row(i), h.row(j)), i == j ? 1.0 : 0.0, 1e-12);
}

TEST(Synthetic, PlantedPatchProjectsBackToItsLabel) {
  SynthConfig cfg;
  cfg.min_labels = cfg.max_labels = 1;
  const Dataset ds = gen_synthetic(cfg);
  const Tensor proj = synthetic_projection(cfg.seed, cfg.dim, cfg.raw_dim);
  for (const Sample& s : ds.samples) {
    const auto label = static_cast<std::size_t>(
        std::find(s.labels.begin(), s.labels.end(), std::int8_t{1}) - s.labels.begin());
    std::size_t planted = 0;
    for (std::size_t p = 0; p < ds.num_patches; ++p) {
      const auto row = s.raw_patch.row(p);
      if (std::all_of(row.begin(), row.end(), [](double v) { return v == 0.0; })) continue;
      ++planted;
      // Back-project with R^T: x = row R^T.
      std::vector<double> back(cfg.dim);
      for (std::size_t a = 0; a < cfg.dim; ++a) back[a] = dot(row, proj.row(a));
      const double cos = dot(back, ds.label_space.embeddings.row(label)) / std::sqrt(dot(back, back));
      EXPECT_GT(cos, 0.99);
    }
    EXPECT_EQ(planted, planted_patches_per_label(cfg));
  }
}

TEST(Synthetic, TeacherIsNormalizedSumOfPositives) {
  const Dataset ds = gen_synthetic(SynthConfig{});
  for (const Sample& s : ds.samples) {
    std::vector<double> t(ds.dim(), 0.0);
    for (std::size_t j = 0; j < ds.num_classes(); ++j)
      if (s.labels[j] == 1)
        for (std::size_t a = 0; a < ds.dim(); ++a) t[a] += ds.label_space.embeddings.at(j, a);
    const double n = std::sqrt(dot(t, t));
    for (std::size_t a = 0; a < ds.dim(); ++a) EXPECT_NEAR(s.teacher_class[a], t[a] / n, 1e-15);
  }
}

TEST(Synthetic, SplitFractions) {
  const Dataset ds = gen_synthetic(SynthConfig{});
  EXPECT_EQ(ds.indices(Split::train).size(), 154u);
  EXPECT_EQ(ds.indices(Split::val).size(), 26u);
  EXPECT_EQ(ds.indices(Split::test).size(), 76u);
}

TEST(Synthetic, InfeasibleRanges) {
  SynthConfig cfg;
  cfg.samples = 0;
  EXPECT_THROW(gen_synthetic(cfg), ValueError);
  cfg = {};
  cfg.max_labels = 9;
  EXPECT_THROW(gen_synthetic(cfg), ValueError);
  cfg = {};
  cfg.min_labels = 3;
  cfg.max_labels = 2;
  EXPECT_THROW(gen_synthetic(cfg), ValueError);
  cfg = {};
  cfg.noise_sigma = -1;
  EXPECT_THROW(gen_synthetic(cfg), ValueError);
  cfg = {};
  cfg.train_fraction = 0.9;
  cfg.val_fraction = 0.2;
  EXPECT_THROW(gen_synthetic(cfg), ValueError);
}

TEST(ZslSplit, MasksUnseenAnnotationsInTrainingOnly) {
  SynthConfig cfg;
  cfg.classes = 10;
  const Dataset ds = gen_synthetic(cfg);
  const ZslSplit z = split_zsl(ds, {9, 8});
  EXPECT_EQ(z.zsl_labels, (std::vector<std::size_t>{8, 9}));
  EXPECT_EQ(z.gzsl_labels.size(), 10u);
  EXPECT_EQ(z.train.label_space.unseen_ids(), (std::vector<std::size_t>{8, 9}));
  ASSERT_EQ(z.train.samples.size(), ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = z.train.samples[i];
    if (s.split == Split::train) {
      EXPECT_EQ(s.labels[8], 0);
      EXPECT_EQ(s.labels[9], 0);
    } else {
      EXPECT_EQ(s.labels, ds.samples[i].labels);
    }
  }
}

TEST(ZslSplit, DropPolicyRemovesImagesWithOnlyUnseenLabels) {
  SynthConfig cfg;
  cfg.min_labels = 1;
  cfg.max_labels = 2;
  const Dataset ds = gen_synthetic(cfg);
  const ZslSplit masked = split_zsl(ds, {6, 7});
  const ZslSplit dropped = split_zsl(ds, {6, 7}, UnseenPolicy::drop_images);
  std::size_t orphans = 0;
  for (const Sample& s : masked.train.samples) orphans += s.split == Split::train && s.num_positives() == 0;
  ASSERT_GT(orphans, 0u);
  EXPECT_EQ(dropped.train.samples.size(), masked.train.samples.size() - orphans);
  for (const Sample& s : dropped.train.samples) {
    if (s.split == Split::train) {
      EXPECT_GE(s.num_positives(), 1u);
    }
  }
}

TEST(ZslSplit, RejectsInvalidUnseenSets) {
  const Dataset ds = gen_synthetic(SynthConfig{});
  EXPECT_THROW(split_zsl(ds, {}), ValueError);
  EXPECT_THROW(split_zsl(ds, {1, 1}), ValueError);
  EXPECT_THROW(split_zsl(ds, {8}), ValueError);
  EXPECT_THROW(split_zsl(ds, {0, 1, 2, 3, 4, 5, 6, 7}), ValueError);
}

TEST(ZslSplit, LargeSeenUnseenPartitionIsAccepted) {
  // 925 seen and 81 unseen labels, the shape of the large web-image benchmark.
  Dataset ds;
  ds.num_patches = 1;
  ds.raw_dim = 1;
  ds.label_space.embeddings = Tensor(Shape{1006, 1}, 1.0);
  ds.label_space.seen.assign(1006, true);
  for (std::size_t i = 0; i < 1006; ++i) ds.label_space.names.push_back("l" + std::to_string(i));
  std::vector<std::size_t> unseen(81);
  std::iota(unseen.begin(), unseen.end(), std::size_t{925});
  const ZslSplit z = split_zsl(ds, unseen);
  EXPECT_EQ(z.zsl_labels.size(), 81u);
  EXPECT_EQ(z.gzsl_labels.size(), 1006u);
  EXPECT_NO_THROW(z.train.validate());
}
