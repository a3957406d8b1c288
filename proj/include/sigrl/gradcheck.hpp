#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sigrl/autodiff.hpp"

namespace sigrl {

/// Scalar-valued function of a set of tape leaves.
using Objective = std::function<Var(Tape&, std::span<const Var>)>;

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  bool finite = true;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tol = 0.0;
  bool passed = false;
  std::string diagnostic;

  double max_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
};

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// The error reported for input i is max_e |analytic_e - numeric_e| divided
/// by max(|analytic|_inf, |numeric|_inf), i.e. the worst elementwise
/// deviation relative to that input's gradient scale. An input whose
/// gradients are both identically zero has error 0.
///
/// `order` 2 is the three-point central difference; 4 uses the five-point
/// stencil, whose smaller truncation error allows a larger, less
/// cancellation-prone step on deep compositions.
inline GradcheckReport gradcheck(const Objective& f, std::vector<Tensor> inputs,
                                 std::vector<std::string> names = {}, double step = 1e-6,
                                 double tol = 1e-6, int order = 2) {
  if (!(step > 0.0)) throw ValueError("gradcheck: step must be positive");
  if (order != 2 && order != 4) throw ValueError("gradcheck: order must be 2 or 4");
  names.resize(inputs.size());
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i].empty()) names[i] = "input" + std::to_string(i);

  GradcheckReport report;
  report.tol = tol;

  auto evaluate = [&](const std::vector<Tensor>& xs, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(xs.size());
    for (const Tensor& x : xs) leaves.push_back(tape.leaf(x));
    Var out = f(tape, leaves);
    if (out.value().size() != 1) throw DimensionError("gradcheck: objective must be scalar");
    if (grads) {
      tape.backward(out);
      for (const Var& v : leaves) grads->push_back(v.grad());
    }
    return out.value()[0];
  };

  std::vector<Tensor> analytic;
  const double f0 = evaluate(inputs, &analytic);
  if (!std::isfinite(f0)) {
    report.diagnostic = "objective is not finite at the base point";
    for (const auto& n : names) report.entries.push_back({n, INFINITY, false});
    return report;
  }

  report.passed = true;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    GradcheckEntry entry{names[i], 0.0, analytic[i].all_finite()};
    Tensor numeric(inputs[i].shape());
    for (std::size_t e = 0; e < inputs[i].size() && entry.finite; ++e) {
      const double orig = inputs[i][e];
      auto at = [&](double offset) {
        inputs[i][e] = orig + offset;
        const double v = evaluate(inputs, nullptr);
        inputs[i][e] = orig;
        return v;
      };
      const double fp = at(step), fm = at(-step);
      double d = (fp - fm) / (2.0 * step);
      bool ok = std::isfinite(fp) && std::isfinite(fm);
      if (order == 4 && ok) {
        const double fpp = at(2.0 * step), fmm = at(-2.0 * step);
        ok = std::isfinite(fpp) && std::isfinite(fmm);
        d = (fmm - 8.0 * fm + 8.0 * fp - fpp) / (12.0 * step);
      }
      if (!ok) {
        entry.finite = false;
        break;
      }
      numeric[e] = d;
    }
    if (entry.finite) {
      const double scale = std::max(max_abs(analytic[i].data()), max_abs(numeric.data()));
      double worst = 0.0;
      for (std::size_t e = 0; e < numeric.size(); ++e)
        worst = std::max(worst, std::abs(analytic[i][e] - numeric[e]));
      entry.max_rel_error = scale > 0.0 ? worst / scale : 0.0;
    } else {
      entry.max_rel_error = INFINITY;
      report.diagnostic += "non-finite values while checking " + names[i] + "; ";
    }
    report.passed = report.passed && entry.finite && entry.max_rel_error <= tol;
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace sigrl
