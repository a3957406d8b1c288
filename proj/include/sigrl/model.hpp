#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sigrl/alignment.hpp"
#include "sigrl/autodiff.hpp"
#include "sigrl/feature_io.hpp"
#include "sigrl/gmc.hpp"
#include "sigrl/svfr.hpp"

namespace sigrl {

/// Stand-in for the image backbone: maps raw class/patch tokens to model space.
template <class T>
struct AdapterParamsT {
  LinearT<T> cls;
  LinearT<T> patch;
};

/// Every trainable parameter group. `label_embeddings` is only present when
/// the label embeddings are trained; otherwise the dataset's are used frozen.
template <class T>
struct ModelParamsT {
  AdapterParamsT<T> adapter;
  GatParamsT<T> gat;
  SdaParamsT<T> sda;
  VfrParamsT<T> vfr;
  T label_embeddings{};

  /// Calls f(name, field) for every present field in a fixed order.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  static bool present(const Tensor& t) { return !t.empty(); }
  static bool present(const Var& v) { return v.valid(); }

  template <class Self, class F>
  static void visit_impl(Self& s, F& f) {
    f("adapter.cls.weight", s.adapter.cls.weight);
    f("adapter.cls.bias", s.adapter.cls.bias);
    f("adapter.patch.weight", s.adapter.patch.weight);
    f("adapter.patch.bias", s.adapter.patch.bias);
    f("gat.weight", s.gat.weight);
    f("gat.attn", s.gat.attn);
    f("sda.feat.weight", s.sda.feat.weight);
    f("sda.feat.bias", s.sda.feat.bias);
    f("sda.attn.weight", s.sda.attn);
    f("vfr.fuse.weight", s.vfr.fuse.weight);
    f("vfr.fuse.bias", s.vfr.fuse.bias);
    f("vfr.recon.weight", s.vfr.recon);
    if (present(s.label_embeddings)) f("label_embeddings", s.label_embeddings);
  }
};

using ModelParams = ModelParamsT<Tensor>;
using ModelVars = ModelParamsT<Var>;

/// Applies `fn` to every present field, producing a structure of the same layout.
template <class U, class T, class F>
ModelParamsT<U> transform(const ModelParamsT<T>& in, F&& fn) {
  ModelParamsT<U> out;
  auto lin = [&](const LinearT<T>& l) { return LinearT<U>{fn(l.weight), fn(l.bias)}; };
  out.adapter = {lin(in.adapter.cls), lin(in.adapter.patch)};
  out.gat = {fn(in.gat.weight), fn(in.gat.attn)};
  out.sda.feat = lin(in.sda.feat);
  out.sda.attn = fn(in.sda.attn);
  out.vfr.fuse = lin(in.vfr.fuse);
  out.vfr.recon = fn(in.vfr.recon);
  bool has_labels = false;
  in.visit([&](const std::string& name, const T&) { has_labels = has_labels || name == "label_embeddings"; });
  if (has_labels) out.label_embeddings = fn(in.label_embeddings);
  return out;
}

struct ModelDims {
  std::size_t classes = 0;
  std::size_t dim = 0;
  std::size_t raw_dim = 0;
};

/// Expected shape of every parameter for the given dimensions.
inline std::vector<std::pair<std::string, Shape>> expected_shapes(const ModelDims& d, bool with_labels) {
  std::vector<std::pair<std::string, Shape>> s = {
      {"adapter.cls.weight", {d.raw_dim, d.dim}}, {"adapter.cls.bias", {d.dim}},
      {"adapter.patch.weight", {d.raw_dim, d.dim}}, {"adapter.patch.bias", {d.dim}},
      {"gat.weight", {d.dim, d.dim}}, {"gat.attn", {2 * d.dim}},
      {"sda.feat.weight", {d.dim, d.dim}}, {"sda.feat.bias", {d.dim}},
      {"sda.attn.weight", {d.dim, 1}},
      {"vfr.fuse.weight", {2 * d.dim, d.dim}}, {"vfr.fuse.bias", {d.dim}},
      {"vfr.recon.weight", {d.dim, 1}},
  };
  if (with_labels) s.push_back({"label_embeddings", {d.classes, d.dim}});
  return s;
}

/// Infers (D, D_raw, C) from the parameter shapes and checks them for
/// mutual consistency.
inline ModelDims model_dims(const ModelParams& params) {
  const Tensor& w = params.adapter.cls.weight;
  if (w.rank() != 2) throw DimensionError("adapter.cls.weight must be a matrix");
  ModelDims d{0, w.dim(1), w.dim(0)};
  const bool with_labels = !params.label_embeddings.empty();
  if (with_labels) {
    if (params.label_embeddings.rank() != 2) throw DimensionError("label_embeddings must be a matrix");
    d.classes = params.label_embeddings.dim(0);
  }
  const auto shapes = expected_shapes(d, with_labels);
  std::size_t i = 0;
  params.visit([&](const std::string& name, const Tensor& t) {
    if (t.shape() != shapes[i].second || name != shapes[i].first) {
      throw DimensionError("parameter " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                           shape_str(shapes[i].second));
    }
    ++i;
  });
  return d;
}

/// Linear layers uniform in +-sqrt(1/fan_in); attention vector N(0, 0.01^2).
inline ModelParams init_params(const ModelDims& dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform = [&](Shape shape, std::size_t fan_in) {
    const double a = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-a, a);
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = u(rng);
    return t;
  };
  auto layer = [&](std::size_t in, std::size_t out) {
    LinearT<Tensor> l;
    l.weight = uniform({in, out}, in);
    l.bias = uniform({out}, in);
    return l;
  };
  const std::size_t d = dims.dim, draw = dims.raw_dim;
  ModelParams p;
  p.adapter.cls = layer(draw, d);
  p.adapter.patch = layer(draw, d);
  p.gat.weight = uniform({d, d}, d);
  p.gat.attn = Tensor(Shape{2 * d});
  std::normal_distribution<double> small(0.0, 0.01);
  for (double& v : p.gat.attn.values()) v = small(rng);
  p.sda.feat = layer(d, d);
  p.sda.attn = uniform({d, 1}, d);
  p.vfr.fuse = layer(2 * d, d);
  p.vfr.recon = uniform({d, 1}, d);
  return p;
}

inline ModelVars bind(Tape& tape, const ModelParams& params, bool requires_grad = true) {
  return transform<Var>(params, [&](const Tensor& t) { return tape.leaf(t, requires_grad); });
}

inline ModelParams gradients(const ModelVars& vars) {
  return transform<Tensor>(vars, [](const Var& v) { return v.grad(); });
}

struct ModelConfig {
  std::size_t k = 16;
  GmcConfig gmc;
  // Score with the GAT-enriched embeddings instead of the original ones.
  bool score_with_enriched = false;
};

/// Label-side quantities shared by every sample of a batch.
struct LabelContext {
  Var embeddings;  // H
  Var enriched;    // H_hat
};

inline LabelContext label_context(Tape& tape, const ModelVars& vars, const LabelSpace& labels,
                                  const ModelConfig& cfg) {
  LabelContext ctx;
  ctx.embeddings = vars.label_embeddings.valid() ? vars.label_embeddings : tape.constant(labels.embeddings);
  ctx.enriched = gmc_forward(vars.gat, ctx.embeddings, cfg.gmc);
  return ctx;
}

struct SampleForward {
  Var f_class;
  Var f_patch;
  SvfrOutput svfr;
  Var scores;
};

/// Adapter -> SVFR -> category scores for one sample.
inline SampleForward forward_on_tape(const ModelVars& vars, const LabelContext& ctx, const Sample& sample,
                                     const ModelConfig& cfg) {
  Tape& tape = ctx.embeddings.tape();
  SampleForward out;
  out.f_class = apply(vars.adapter.cls, tape.constant(sample.raw_class));
  out.f_patch = apply(vars.adapter.patch, tape.constant(sample.raw_patch));
  out.svfr = svfr_forward(vars.sda, vars.vfr, out.f_patch, ctx.embeddings, ctx.enriched);
  const Var& h = cfg.score_with_enriched ? ctx.enriched : ctx.embeddings;
  out.scores = score(h, out.f_class, out.svfr.reconstructed, cfg.k);
  return out;
}

/// Category scores [C] of one sample.
inline Tensor forward_sample(const ModelParams& params, const Sample& sample, const LabelSpace& labels,
                             const ModelConfig& cfg) {
  Tape tape;
  const ModelVars vars = bind(tape, params, false);
  const LabelContext ctx = label_context(tape, vars, labels, cfg);
  return forward_on_tape(vars, ctx, sample, cfg).scores.value();
}

/// Checks that a parameter set can run on a dataset with the given shape.
inline void check_compatible(const ModelParams& params, const Dataset& ds, const ModelConfig& cfg) {
  const ModelDims d = model_dims(params);
  if (d.dim != ds.dim() || d.raw_dim != ds.raw_dim) {
    throw DimensionError("model has D=" + std::to_string(d.dim) + ", D_raw=" + std::to_string(d.raw_dim) +
                         " but dataset has D=" + std::to_string(ds.dim()) +
                         ", D_raw=" + std::to_string(ds.raw_dim));
  }
  if (!params.label_embeddings.empty() && d.classes != ds.num_classes()) {
    throw DimensionError("model has " + std::to_string(d.classes) + " trained label embeddings but dataset has " +
                         std::to_string(ds.num_classes()) + " classes");
  }
  if (cfg.k < 1 || cfg.k > ds.num_patches) {
    throw ValueError("top-k size " + std::to_string(cfg.k) + " outside [1, P=" + std::to_string(ds.num_patches) + "]");
  }
}

/// Parameters that score <h_i, teacher> on noise-free synthetic data: the
/// class adapter inverts the generator's projection and the patch adapter is
/// zero, so the local score term vanishes.
inline ModelParams oracle_params(const Tensor& projection, std::uint64_t seed) {
  const std::size_t d = projection.dim(0), draw = projection.dim(1);
  ModelParams p = init_params({0, d, draw}, seed);
  Tensor inv(Shape{draw, d});
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t k = 0; k < draw; ++k) inv.at(k, a) = projection.at(a, k);
  p.adapter.cls.weight = inv;
  p.adapter.cls.bias = Tensor(Shape{d});
  p.adapter.patch.weight = Tensor(Shape{draw, d});
  p.adapter.patch.bias = Tensor(Shape{d});
  return p;
}

}  // namespace sigrl
