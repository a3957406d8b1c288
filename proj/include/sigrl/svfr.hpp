#pragma once

#include "sigrl/autodiff.hpp"
#include "sigrl/gmc.hpp"

namespace sigrl {

/// Semantic decoupling attention: `feat` is D -> D, `attn` [D x 1] maps
/// each patch feature to an attention logit. Logits carry no bias since the
/// softmax over patches would cancel it.
template <class T>
struct SdaParamsT {
  LinearT<T> feat;
  T attn;
};

/// Feature reconstruction: `fuse` is 2D -> D, `recon` [D x 1] as `attn` above.
template <class T>
struct VfrParamsT {
  LinearT<T> fuse;
  T recon;
};

using SdaParams = SdaParamsT<Tensor>;
using SdaVars = SdaParamsT<Var>;
using VfrParams = VfrParamsT<Tensor>;
using VfrVars = VfrParamsT<Var>;

struct SdaFeatures {
  Var features;   // M [C x D]
  Var attention;  // A [C x P], rows sum to 1
};

struct Reconstruction {
  Var attention;      // A_hat [C x P], rows sum to 1
  Var weights;        // w [P], w[p] = sum_i A_hat[i][p]
  Var reconstructed;  // M_hat [P x D]
};

struct SvfrOutput {
  Var features;         // M
  Var attention;        // A
  Var attention_map;    // Q
  Var decoupled;        // T
  Var fused;            // O
  Var recon_attention;  // A_hat
  Var weights;          // w
  Var reconstructed;    // M_hat
};

namespace detail {

inline void check_patch_label_dims(const char* op, const Var& patches, const Var& labels) {
  const Tensor& f = patches.value();
  const Tensor& h = labels.value();
  if (f.rank() != 2 || h.rank() != 2 || f.dim(1) != h.dim(1)) {
    throw DimensionError(std::string(op) + ": patches " + shape_str(f.shape()) + " and labels " +
                         shape_str(h.shape()) + " disagree");
  }
}

}  // namespace detail

/// M[i] = sum_p A[i][p] F_patch[p] with A[i] = softmax_p(FC(tanh(FC(tanh(F_patch[p] * h_i))))).
inline SdaFeatures sda_category_features(const SdaVars& sda, const Var& patches, const Var& labels) {
  detail::check_patch_label_dims("sda_category_features", patches, labels);
  const std::size_t c = labels.value().dim(0), p = patches.value().dim(0);
  const Var f = apply(sda.feat, tanh_op(outer_hadamard(labels, patches)));  // row (i, p)
  const Var logits = matmul(tanh_op(f), sda.attn);
  const Var attention = softmax(reshape(logits, {c, p}), 1);
  return {matmul(attention, patches), attention};
}

/// Q[i][j] = relu(cos(M[i], H[j])).
inline Var sda_attention_map(const Var& features, const Var& labels) {
  return relu_op(cosine_rows(features, labels));
}

/// T = L1-normalized(Q) x M.
inline Var sda_decouple(const Var& attention_map, const Var& features) {
  return mix_rows(normalize_rows_l1(attention_map), features);
}

/// O[i] = FC(concat(H_hat[i], T[i])).
inline Var vfr_fuse(const VfrVars& vfr, const Var& enriched, const Var& decoupled) {
  detail::require_same_shape("vfr_fuse", enriched.value(), decoupled.value());
  return apply(vfr.fuse, concat(enriched, decoupled, 1));
}

/// A_hat[i] = softmax_p(FC(tanh(F_patch[p] * O[i]))); each patch is rescaled
/// by its accumulated attention, M_hat[p] = (sum_i A_hat[i][p]) F_patch[p].
inline Reconstruction vfr_reconstruct(const VfrVars& vfr, const Var& patches, const Var& fused) {
  detail::check_patch_label_dims("vfr_reconstruct", patches, fused);
  const std::size_t c = fused.value().dim(0), p = patches.value().dim(0);
  const Var logits = matmul(tanh_op(outer_hadamard(fused, patches)), vfr.recon);
  Var attention = softmax(reshape(logits, {c, p}), 1);
  Var weights = sum(attention, 0);
  return {attention, weights, row_scale(patches, weights)};
}

inline SvfrOutput svfr_forward(const SdaVars& sda, const VfrVars& vfr, const Var& patches,
                               const Var& labels, const Var& enriched) {
  SvfrOutput out;
  const SdaFeatures m = sda_category_features(sda, patches, labels);
  out.features = m.features;
  out.attention = m.attention;
  out.attention_map = sda_attention_map(m.features, labels);
  out.decoupled = sda_decouple(out.attention_map, m.features);
  out.fused = vfr_fuse(vfr, enriched, out.decoupled);
  const Reconstruction r = vfr_reconstruct(vfr, patches, out.fused);
  out.recon_attention = r.attention;
  out.weights = r.weights;
  out.reconstructed = r.reconstructed;
  return out;
}

}  // namespace sigrl
