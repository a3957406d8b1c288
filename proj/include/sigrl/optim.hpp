#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "sigrl/model.hpp"

namespace sigrl {

struct AdamWConfig {
  double lr = 1e-3;
  double min_lr = 1e-7;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr >= 0.0 && min_lr >= 0.0 && min_lr <= lr)) throw ValueError("need 0 <= min_lr <= lr");
    if (!(weight_decay >= 0.0)) throw ValueError("weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ValueError("betas must lie in [0,1)");
    if (!(eps > 0.0)) throw ValueError("eps must be > 0");
  }
};

/// Cosine decay from `base` at step 0 to `min` at `total`.
inline double lr_schedule(std::size_t step, std::size_t total, double base, double min) {
  if (total == 0) return base;
  if (step > total) throw ValueError("lr_schedule: step beyond total");
  const double progress = static_cast<double>(step) / static_cast<double>(total);
  return min + (base - min) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// One decoupled-weight-decay Adam update of a flat parameter block.
/// `step` is the 1-based step count used for bias correction.
inline void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                         std::span<double> v, std::size_t step, double lr, const AdamWConfig& hp) {
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * grad[i];
    v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    param[i] *= 1.0 - lr * hp.weight_decay;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + hp.eps);
  }
}

/// First/second moments per parameter, in ModelParams visit order.
struct OptimState {
  std::vector<Tensor> first;
  std::vector<Tensor> second;
  std::size_t step = 0;
};

inline void adamw_step(ModelParams& params, const ModelParams& grads, OptimState& state, const AdamWConfig& hp,
                       double lr) {
  std::vector<Tensor*> ps;
  std::vector<std::string> names;
  params.visit([&](const std::string& name, Tensor& t) {
    ps.push_back(&t);
    names.push_back(name);
  });
  std::vector<const Tensor*> gs;
  grads.visit([&](const std::string&, const Tensor& t) { gs.push_back(&t); });
  if (gs.size() != ps.size()) throw DimensionError("gradient set does not match parameter set");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (gs[i]->shape() != ps[i]->shape()) throw DimensionError("gradient shape mismatch for " + names[i]);
    if (!gs[i]->all_finite()) throw NumericError("non-finite gradient in parameter group " + names[i]);
  }
  if (state.first.empty()) {
    for (Tensor* p : ps) {
      state.first.emplace_back(p->shape());
      state.second.emplace_back(p->shape());
    }
  }
  if (state.first.size() != ps.size()) throw DimensionError("optimizer state does not match parameter set");
  ++state.step;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    adamw_update(ps[i]->data(), gs[i]->data(), state.first[i].data(), state.second[i].data(), state.step, lr, hp);
  }
}

}  // namespace sigrl
