#pragma once

#include <functional>
#include <vector>

#include "flexi/param_store.hpp"
#include "flexi/rng.hpp"
#include "flexi/tensor.hpp"

namespace flexi {

/// Compare reverse-mode gradients against central finite differences.
///
/// `f` must build a fresh graph over the current parameter values and return
/// the scalar loss. Coordinates above `max_coords` total are subsampled with
/// a seeded RNG so the oracle stays cheap on large stores.
inline double grad_check(const std::function<double()>& f, ParameterStore& params,
                         double step, uint64_t seed = 0,
                         int64_t max_coords = 10000) {
  if (step <= 0.0 || step > 1e-2)
    throw UsageError("grad_check: step must be in (0, 1e-2]");

  // Analytic gradient at the current point. The callback is responsible for
  // running backward(); grads land in the parameter tensors.
  params.zero_grads();
  f();

  struct Coord {
    Tensor* t;
    size_t i;
    double analytic;
  };
  std::vector<Coord> coords;
  for (auto& [path, t] : params) {
    t.ensure_grad();
    for (size_t i = 0; i < t.data.size(); ++i)
      coords.push_back({&t, i, t.grad[i]});
  }
  if (static_cast<int64_t>(coords.size()) > max_coords) {
    Rng rng(seed);
    std::vector<Coord> picked;
    picked.reserve(static_cast<size_t>(max_coords));
    for (int64_t k = 0; k < max_coords; ++k)
      picked.push_back(
          coords[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(coords.size()) - 1))]);
    coords = std::move(picked);
  }

  double max_rel = 0.0;
  for (const Coord& c : coords) {
    double saved = c.t->data[c.i];
    c.t->data[c.i] = saved + step;
    double fp = f();
    c.t->data[c.i] = saved - step;
    double fm = f();
    c.t->data[c.i] = saved;
    double numeric = (fp - fm) / (2.0 * step);
    // Coordinates where both methods see (sub-)roundoff-level gradients are
    // genuinely zero; the secant there measures cancellation noise, not a
    // derivative, so they are excluded from the relative comparison.
    if (std::abs(numeric) < 1e-6 && std::abs(c.analytic) < 1e-6) continue;
    double denom = std::max({std::abs(numeric), std::abs(c.analytic), 1e-8});
    max_rel = std::max(max_rel, std::abs(numeric - c.analytic) / denom);
  }
  return max_rel;
}

}  // namespace flexi
