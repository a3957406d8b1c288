#pragma once

#include "sigrl/autodiff.hpp"

namespace sigrl {

/// Weight [in x out] and bias [out] of a fully connected layer.
template <class T>
struct LinearT {
  T weight;
  T bias;
};

inline Var apply(const LinearT<Var>& layer, const Var& x) {
  return linear(x, layer.weight, layer.bias);
}

/// Single-head graph attention layer: node map W [D x D'] and attention
/// vector [2D'] whose halves score the source and the neighbour.
template <class T>
struct GatParamsT {
  T weight;
  T attn;
};

using GatParams = GatParamsT<Tensor>;
using GatVars = GatParamsT<Var>;

enum class GatActivation { elu, tanh };

struct GmcConfig {
  double slope = 0.2;
  GatActivation activation = GatActivation::elu;
};

/// E[i][j] = LeakyReLU(attn . [W h_i, W h_j]) over the fully connected
/// label graph (self loops included).
inline Var edge_scores(const GatVars& gat, const Var& labels, double slope = 0.2) {
  const Var mapped = matmul(labels, gat.weight);
  const std::size_t out = mapped.value().dim(1);
  if (gat.attn.value().shape() != Shape{2 * out}) {
    throw DimensionError("gat attention vector " + shape_str(gat.attn.value().shape()) +
                         " does not match latent width " + std::to_string(out));
  }
  // Column 0 scores node i as source, column 1 scores node j as neighbour.
  const Var halves = matmul(mapped, transpose(reshape(gat.attn, {2, out})));
  return leaky_relu(outer_add(column(halves, 0), column(halves, 1)), slope);
}

/// Row-wise softmax of edge scores over each node's neighbourhood.
inline Var attention_coefficients(const Var& scores) { return softmax(scores, 1); }

/// Enriched label embeddings: h_hat_i = act(sum_j beta_ij W h_j).
inline Var gmc_forward(const GatVars& gat, const Var& labels, const GmcConfig& cfg = {}) {
  const Var beta = attention_coefficients(edge_scores(gat, labels, cfg.slope));
  const Var aggregated = mix_rows(beta, matmul(labels, gat.weight));
  return cfg.activation == GatActivation::elu ? elu_op(aggregated) : tanh_op(aggregated);
}

}  // namespace sigrl
