#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "sigrl/binary_io.hpp"
#include "sigrl/error.hpp"
#include "sigrl/tensor.hpp"

namespace sigrl {

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

/// Label vocabulary: names, per-class embeddings [C x D], seen/unseen flags.
struct LabelSpace {
  std::vector<std::string> names;
  Tensor embeddings;
  std::vector<bool> seen;

  std::size_t num_classes() const noexcept { return names.size(); }
  std::size_t dim() const { return embeddings.rank() == 2 ? embeddings.dim(1) : 0; }

  std::vector<std::size_t> unseen_ids() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < seen.size(); ++i)
      if (!seen[i]) out.push_back(i);
    return out;
  }

  void validate() const {
    const std::size_t c = names.size();
    if (c < 2) throw ValueError("label space needs at least 2 classes");
    if (embeddings.rank() != 2 || embeddings.dim(0) != c || embeddings.dim(1) == 0) {
      throw DimensionError("label embeddings " + shape_str(embeddings.shape()) + " do not match " +
                           std::to_string(c) + " classes");
    }
    if (seen.size() != c) throw DimensionError("seen mask length does not match class count");
    if (!embeddings.all_finite()) throw ValueError("label embeddings contain non-finite values");
    std::set<std::string> unique(names.begin(), names.end());
    if (unique.size() != c) throw ValueError("label names are not unique");
  }
};

/// One image's precomputed features and annotation vector (+1 / -1 / 0).
struct Sample {
  std::string image_id;
  Tensor raw_class;      // [D_raw]
  Tensor raw_patch;      // [P x D_raw]
  Tensor teacher_class;  // [D]
  std::vector<std::int8_t> labels;
  Split split = Split::train;

  std::size_t num_positives() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::int8_t{1}));
  }
};

struct Dataset {
  LabelSpace label_space;
  std::size_t num_patches = 0;
  std::size_t raw_dim = 0;
  std::vector<Sample> samples;

  std::size_t num_classes() const noexcept { return label_space.num_classes(); }
  std::size_t dim() const { return label_space.dim(); }

  std::vector<std::size_t> indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == split) out.push_back(i);
    return out;
  }

  void validate() const {
    label_space.validate();
    if (num_patches == 0 || raw_dim == 0) throw ValueError("dataset needs P >= 1 and D_raw >= 1");
    const std::size_t c = num_classes(), d = dim();
    for (const Sample& s : samples) {
      if (s.raw_class.shape() != Shape{raw_dim} || s.raw_patch.shape() != Shape{num_patches, raw_dim} ||
          s.teacher_class.shape() != Shape{d} || s.labels.size() != c) {
        throw DimensionError("sample " + s.image_id + " does not match dataset dimensions");
      }
      for (std::int8_t y : s.labels)
        if (y < -1 || y > 1) throw ValueError("sample " + s.image_id + " has a label outside {-1,0,1}");
    }
  }
};

// ---------------------------------------------------------------------------
// SIGF container

inline constexpr char kDatasetMagic[4] = {'S', 'I', 'G', 'F'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  ds.validate();
  const std::size_t c = ds.num_classes(), d = ds.dim();
  io::ByteWriter w;
  w.raw(std::string_view(kDatasetMagic, 4));
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(c));
  w.u32(static_cast<std::uint32_t>(ds.num_patches));
  w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(ds.raw_dim));
  w.u32(static_cast<std::uint32_t>(ds.samples.size()));
  for (const auto& name : ds.label_space.names) w.str(name);
  for (bool s : ds.label_space.seen) w.u8(s ? 1 : 0);
  w.f64s(ds.label_space.embeddings.data());
  for (const Sample& s : ds.samples) {
    w.str(s.image_id);
    w.f64s(s.raw_class.data());
    w.f64s(s.raw_patch.data());
    w.f64s(s.teacher_class.data());
    for (std::int8_t y : s.labels) w.i8(y);
    w.u8(static_cast<std::uint8_t>(s.split));
  }
  return w.bytes();
}

namespace detail {

inline Tensor read_f64s(io::ByteReader& r, Shape shape, const char* what) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const std::size_t at = r.offset();
    t[i] = r.f64(what);
    if (!std::isfinite(t[i])) throw FormatError(FormatErrc::invalid_value, at, std::string("non-finite ") + what);
  }
  return t;
}

}  // namespace detail

/// Parses a SIGF byte image. A structural pass first checks that the payload
/// length matches the header exactly; values are validated on the second pass.
inline Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (r.remaining() < 4 || std::memcmp(bytes.data(), kDatasetMagic, 4) != 0) {
    throw FormatError(FormatErrc::bad_magic, 0, "expected \"SIGF\"");
  }
  r.skip(4, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kDatasetVersion) {
    throw FormatError(FormatErrc::version_mismatch, 4,
                      "file version " + std::to_string(version) + ", reader supports " +
                          std::to_string(kDatasetVersion));
  }
  auto dim_field = [&](const char* what, std::uint32_t min) {
    const std::size_t at = r.offset();
    const std::uint32_t v = r.u32(what);
    if (v < min) {
      throw FormatError(FormatErrc::dimension_mismatch, at,
                        std::string(what) + "=" + std::to_string(v) + " below minimum " + std::to_string(min));
    }
    return std::size_t{v};
  };
  const std::size_t c = dim_field("C", 2);
  const std::size_t p = dim_field("P", 1);
  const std::size_t d = dim_field("D", 1);
  const std::size_t draw = dim_field("D_raw", 1);
  const std::size_t n = dim_field("N", 0);

  // Structural pass.
  const std::size_t body = r.offset();
  for (std::size_t i = 0; i < c; ++i) r.skip(r.u32("label name length"), "label name");
  r.skip(c, "seen mask");
  r.skip(c * d * 8, "label embeddings");
  const std::size_t fixed = (draw + p * draw + d) * 8 + c + 1;
  for (std::size_t i = 0; i < n; ++i) {
    r.skip(r.u32("image id length"), "image id");
    r.skip(fixed, "sample record");
  }
  if (!r.at_end()) {
    throw FormatError(FormatErrc::dimension_mismatch, r.offset(),
                      std::to_string(r.remaining()) + " bytes beyond the " + std::to_string(n) +
                          " records the header declares");
  }

  // Value pass.
  r.seek(body);
  Dataset ds;
  ds.num_patches = p;
  ds.raw_dim = draw;
  LabelSpace& ls = ds.label_space;
  std::set<std::string> unique;
  for (std::size_t i = 0; i < c; ++i) {
    const std::size_t at = r.offset();
    ls.names.push_back(r.str("label name"));
    if (!unique.insert(ls.names.back()).second) {
      throw FormatError(FormatErrc::invalid_value, at, "duplicate label name " + ls.names.back());
    }
  }
  for (std::size_t i = 0; i < c; ++i) {
    const std::size_t at = r.offset();
    const std::uint8_t b = r.u8("seen mask");
    if (b > 1) throw FormatError(FormatErrc::invalid_value, at, "seen mask byte must be 0 or 1");
    ls.seen.push_back(b == 1);
  }
  ls.embeddings = detail::read_f64s(r, Shape{c, d}, "label embedding");
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.image_id = r.str("image id");
    s.raw_class = detail::read_f64s(r, Shape{draw}, "raw_class");
    s.raw_patch = detail::read_f64s(r, Shape{p, draw}, "raw_patch");
    s.teacher_class = detail::read_f64s(r, Shape{d}, "teacher_class");
    s.labels.resize(c);
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t at = r.offset();
      s.labels[j] = r.i8("label");
      if (s.labels[j] < -1 || s.labels[j] > 1) {
        throw FormatError(FormatErrc::label_out_of_range, at,
                          "label " + std::to_string(s.labels[j]) + " of " + s.image_id);
      }
    }
    const std::size_t at = r.offset();
    const std::uint8_t tag = r.u8("split tag");
    if (tag > 2) throw FormatError(FormatErrc::invalid_value, at, "split tag " + std::to_string(tag));
    s.split = static_cast<Split>(tag);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline void write_dataset(const Dataset& ds, const std::string& path) {
  io::write_file(path, encode_dataset(ds));
}

inline Dataset read_dataset(const std::string& path) { return decode_dataset(io::read_file(path)); }

// ---------------------------------------------------------------------------
// Single-positive masking

/// Keeps one uniformly chosen positive per training sample and zeroes every
/// other annotation. Validation and test samples are left untouched.
inline Dataset apply_spml_mask(Dataset ds, std::uint64_t seed) {
  std::vector<std::string> empty;
  for (const Sample& s : ds.samples)
    if (s.split == Split::train && s.num_positives() == 0) empty.push_back(s.image_id);
  if (!empty.empty()) {
    std::string ids;
    for (const auto& id : empty) ids += (ids.empty() ? "" : ", ") + id;
    throw ValueError("SPML masking needs a positive label in every training sample; none in: " + ids);
  }
  std::mt19937_64 rng(seed);
  for (Sample& s : ds.samples) {
    if (s.split != Split::train) continue;
    std::vector<std::size_t> pos;
    for (std::size_t j = 0; j < s.labels.size(); ++j)
      if (s.labels[j] == 1) pos.push_back(j);
    std::uniform_int_distribution<std::size_t> pick(0, pos.size() - 1);
    const std::size_t keep = pos[pick(rng)];
    std::fill(s.labels.begin(), s.labels.end(), std::int8_t{0});
    s.labels[keep] = 1;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct SynthConfig {
  std::size_t classes = 8;
  std::size_t patches = 16;
  std::size_t dim = 32;
  std::size_t raw_dim = 48;
  std::size_t samples = 256;
  double noise_sigma = 0.0;
  std::size_t min_labels = 2;
  std::size_t max_labels = 4;
  double train_fraction = 0.6;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
};

namespace detail {

inline void normalize(std::span<double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  s = std::sqrt(s);
  if (s > 0)
    for (double& x : v) x /= s;
}

/// Gaussian rows, orthonormalized by Gram-Schmidt when rows <= cols and
/// merely normalized otherwise.
inline Tensor quasi_orthogonal_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Tensor t(Shape{rows, cols});
  for (double& v : t.values()) v = gauss(rng);
  for (std::size_t i = 0; i < rows; ++i) {
    auto ri = t.row(i);
    if (rows <= cols) {
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t j = 0; j < i; ++j) {
          auto rj = t.row(j);
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += ri[c] * rj[c];
          for (std::size_t c = 0; c < cols; ++c) ri[c] -= dot * rj[c];
        }
    }
    normalize(ri);
  }
  return t;
}

inline std::uint64_t projection_seed(std::uint64_t seed) { return seed ^ 0x9e3779b97f4a7c15ULL; }

}  // namespace detail

/// Fixed random map [D x D_raw] that embeds model-space vectors into raw
/// feature space. Rows are orthonormal when D <= D_raw, so x = (x R) R^T.
inline Tensor synthetic_projection(std::uint64_t seed, std::size_t dim, std::size_t raw_dim) {
  std::mt19937_64 rng(detail::projection_seed(seed));
  Tensor r = detail::quasi_orthogonal_rows(dim, raw_dim, rng);
  if (dim > raw_dim)
    for (double& v : r.values()) v *= std::sqrt(static_cast<double>(raw_dim) / static_cast<double>(dim));
  return r;
}

/// Number of patches each positive label is planted into.
inline std::size_t planted_patches_per_label(const SynthConfig& cfg) {
  return std::max<std::size_t>(1, cfg.patches / (4 * cfg.max_labels));
}

inline Dataset gen_synthetic(const SynthConfig& cfg) {
  if (cfg.classes < 2 || cfg.patches < 1 || cfg.dim < 1 || cfg.raw_dim < 1 || cfg.samples < 1) {
    throw ValueError("synthetic generator needs C >= 2 and P, D, D_raw, N >= 1");
  }
  if (!(cfg.noise_sigma >= 0.0)) throw ValueError("noise_sigma must be >= 0");
  if (cfg.min_labels < 1 || cfg.min_labels > cfg.max_labels || cfg.max_labels > cfg.classes) {
    throw ValueError("labels-per-image range must satisfy 1 <= min <= max <= C");
  }
  if (cfg.max_labels > cfg.patches) throw ValueError("more labels per image than patches to plant them in");
  if (cfg.train_fraction < 0 || cfg.val_fraction < 0 || cfg.train_fraction + cfg.val_fraction > 1.0) {
    throw ValueError("split fractions must be nonnegative and sum to at most 1");
  }

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t c = cfg.classes, p = cfg.patches, d = cfg.dim, draw = cfg.raw_dim;

  Dataset ds;
  ds.num_patches = p;
  ds.raw_dim = draw;
  for (std::size_t i = 0; i < c; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "class_%02zu", i);
    ds.label_space.names.emplace_back(buf);
  }
  ds.label_space.embeddings = detail::quasi_orthogonal_rows(c, d, rng);
  ds.label_space.seen.assign(c, true);
  const Tensor& h = ds.label_space.embeddings;
  const Tensor proj = synthetic_projection(cfg.seed, d, draw);

  auto to_raw = [&](std::span<const double> x, std::span<double> out) {
    for (std::size_t k = 0; k < draw; ++k) {
      double s = 0.0;
      for (std::size_t a = 0; a < d; ++a) s += x[a] * proj.at(a, k);
      out[k] = s;
    }
  };

  const std::size_t per_label = planted_patches_per_label(cfg);
  std::uniform_int_distribution<std::size_t> count(cfg.min_labels, cfg.max_labels);
  std::vector<std::size_t> classes(c), patch_order(p);
  for (std::size_t n = 0; n < cfg.samples; ++n) {
    Sample s;
    char buf[32];
    std::snprintf(buf, sizeof buf, "img_%05zu", n);
    s.image_id = buf;
    const std::size_t npos = count(rng);
    std::iota(classes.begin(), classes.end(), std::size_t{0});
    std::shuffle(classes.begin(), classes.end(), rng);
    std::vector<std::size_t> pos(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(npos));
    std::sort(pos.begin(), pos.end());

    s.labels.assign(c, std::int8_t{-1});
    s.teacher_class = Tensor(Shape{d});
    for (std::size_t j : pos) {
      s.labels[j] = 1;
      for (std::size_t a = 0; a < d; ++a) s.teacher_class[a] += h.at(j, a);
    }
    detail::normalize(s.teacher_class.data());

    s.raw_class = Tensor(Shape{draw});
    to_raw(s.teacher_class.data(), s.raw_class.data());

    s.raw_patch = Tensor(Shape{p, draw});
    std::iota(patch_order.begin(), patch_order.end(), std::size_t{0});
    std::shuffle(patch_order.begin(), patch_order.end(), rng);
    for (std::size_t q = 0; q < pos.size(); ++q)
      for (std::size_t m = 0; m < per_label; ++m)
        to_raw(h.row(pos[q]), s.raw_patch.row(patch_order[q * per_label + m]));

    for (double& v : s.raw_class.values()) v += cfg.noise_sigma * gauss(rng);
    for (double& v : s.raw_patch.values()) v += cfg.noise_sigma * gauss(rng);
    ds.samples.push_back(std::move(s));
  }

  std::vector<std::size_t> order(cfg.samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(cfg.samples)));
  const auto n_val = std::min(cfg.samples - n_train,
                              static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(cfg.samples))));
  for (std::size_t i = 0; i < order.size(); ++i) {
    ds.samples[order[i]].split = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Zero-shot split

enum class UnseenPolicy {
  mask_annotations,  // unseen annotations in training samples become 0
  drop_images,       // additionally drop training samples left without a positive
};

struct ZslSplit {
  Dataset train;
  std::vector<std::size_t> zsl_labels;   // unseen classes only
  std::vector<std::size_t> gzsl_labels;  // every class
};

inline ZslSplit split_zsl(const Dataset& ds, std::vector<std::size_t> unseen,
                          UnseenPolicy policy = UnseenPolicy::mask_annotations) {
  const std::size_t c = ds.num_classes();
  std::sort(unseen.begin(), unseen.end());
  if (unseen.empty()) throw ValueError("zero-shot split needs at least one unseen label");
  if (std::adjacent_find(unseen.begin(), unseen.end()) != unseen.end()) {
    throw ValueError("unseen label ids contain duplicates");
  }
  if (unseen.back() >= c) {
    throw ValueError("unseen label id " + std::to_string(unseen.back()) + " out of range for " +
                     std::to_string(c) + " classes");
  }
  if (unseen.size() == c) throw ValueError("cannot train with every label unseen");

  ZslSplit out;
  out.train = ds;
  auto& ls = out.train.label_space;
  ls.seen.assign(c, true);
  for (std::size_t j : unseen) ls.seen[j] = false;
  std::vector<Sample> kept;
  kept.reserve(out.train.samples.size());
  for (Sample& s : out.train.samples) {
    if (s.split == Split::train) {
      for (std::size_t j : unseen) s.labels[j] = 0;
      if (policy == UnseenPolicy::drop_images && s.num_positives() == 0) continue;
    }
    kept.push_back(std::move(s));
  }
  out.train.samples = std::move(kept);
  out.zsl_labels = unseen;
  out.gzsl_labels.resize(c);
  std::iota(out.gzsl_labels.begin(), out.gzsl_labels.end(), std::size_t{0});
  return out;
}

}  // namespace sigrl
