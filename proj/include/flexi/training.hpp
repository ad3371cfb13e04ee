#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <sstream>

#include "flexi/model.hpp"

namespace flexi {

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::map<std::string, Tensor> m, v;  // first/second moments per parameter
  int64_t step = 0;
};

/// Standard Adam with bias correction, applied to every parameter that has a
/// populated gradient slot.
inline void adam_step(ParameterStore& params, AdamState& state, double alpha,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  ++state.step;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& [path, t] : params) {
    t.ensure_grad();
    Tensor& m = state.m.try_emplace(path, Tensor::zeros(t.shape)).first->second;
    Tensor& v = state.v.try_emplace(path, Tensor::zeros(t.shape)).first->second;
    for (size_t i = 0; i < t.data.size(); ++i) {
      double g = t.grad[i];
      m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g;
      v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g * g;
      double mhat = m.data[i] / bc1;
      double vhat = v.data[i] / bc2;
      t.data[i] -= alpha * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// training configuration

struct TrainingConfig {
  double alpha = 7e-4;
  int64_t batch = 64;
  int64_t epochs = 30;
  double beta = 1.2e-5;
  double eta = 1.70;
  uint64_t seed = 0;
  PropagatorKind propagator = PropagatorKind::DCP;

  void validate() const {
    if (alpha <= 0) throw ConfigError("training: alpha must be > 0");
    if (batch < 1) throw ConfigError("training: batch must be >= 1");
    if (epochs < 1) throw ConfigError("training: epochs must be >= 1");
    if (beta < 0 || eta < 0) throw ConfigError("training: beta, eta must be >= 0");
  }

  json to_json() const {
    return {{"alpha", alpha}, {"batch", batch},
            {"epochs", epochs}, {"beta", beta},
            {"eta", eta},       {"seed", seed},
            {"propagator", propagator == PropagatorKind::DCP ? "dcp" : "pep"}};
  }
  static TrainingConfig from_json(const json& j) {
    TrainingConfig c;
    c.alpha = j.value("alpha", c.alpha);
    c.batch = j.value("batch", c.batch);
    c.epochs = j.value("epochs", c.epochs);
    c.beta = j.value("beta", c.beta);
    c.eta = j.value("eta", c.eta);
    c.seed = j.value("seed", c.seed);
    c.propagator =
        j.value("propagator", "dcp") == std::string("pep") ? PropagatorKind::PEP
                                                           : PropagatorKind::DCP;
    c.validate();
    return c;
  }

  /// Published Burgers rates; desk scale shortens epochs only.
  static TrainingConfig burgers_desk() { return TrainingConfig{}; }
  static TrainingConfig burgers_full() {
    TrainingConfig c;
    c.epochs = 100;
    return c;
  }
  static TrainingConfig advdiff_desk() {
    TrainingConfig c;
    c.beta = 1.152e-5;
    c.eta = 1.15;
    c.epochs = 20;
    return c;
  }
  static TrainingConfig advdiff_full() {
    TrainingConfig c = advdiff_desk();
    c.epochs = 75;
    return c;
  }
};

struct ZoneMse {
  std::optional<double> interp, left_extrap, right_extrap;  // absent if empty
};

struct TrainReport {
  std::vector<double> loss, loss_re, loss_pre, loss_kl, seconds;  // per epoch
  std::vector<int64_t> steps_per_epoch;
  ZoneMse final_mse;

  std::string to_csv() const {
    std::ostringstream out;
    out << "epoch,loss,loss_re,loss_pre,loss_kl,seconds\n";
    for (size_t e = 0; e < loss.size(); ++e)
      out << (e + 1) << "," << loss[e] << "," << loss_re[e] << "," << loss_pre[e]
          << "," << loss_kl[e] << "," << seconds[e] << "\n";
    return out.str();
  }
  json to_json() const {
    json zones;
    if (final_mse.interp) zones["interp"] = *final_mse.interp;
    if (final_mse.left_extrap) zones["left_extrap"] = *final_mse.left_extrap;
    if (final_mse.right_extrap) zones["right_extrap"] = *final_mse.right_extrap;
    return {{"loss", loss},       {"loss_re", loss_re}, {"loss_pre", loss_pre},
            {"loss_kl", loss_kl}, {"seconds", seconds}, {"final_mse", zones}};
  }
};

/// Thrown when a training step produces a non-finite loss; carries a JSON
/// snapshot of the offending batch for post-mortem inspection.
struct TrainingDiverged : std::runtime_error {
  json snapshot;
  TrainingDiverged(std::string msg, json snap)
      : std::runtime_error(std::move(msg)), snapshot(std::move(snap)) {}
};

// ---------------------------------------------------------------------------
// training loop

/// Mini-batch optimization of the full loss. Deterministic for a fixed
/// (dataset, config): shuffling, sampling and initialization all derive from
/// config.seed. The model must be constructed with matching configs.
inline TrainReport train(Model& model, const DatasetSplit& split,
                         const TrainingConfig& cfg,
                         const std::function<void(int64_t, const TrainReport&)>&
                             on_epoch = nullptr) {
  cfg.validate();
  if (split.train.empty()) throw ConfigError("train: empty training split");
  if (!model.initialized()) throw UsageError("train: model not initialized");

  Rng shuffle_rng = Rng::derive(cfg.seed, 1);
  Rng sample_rng = Rng::derive(cfg.seed, 2);
  AdamState adam;
  TrainReport report;
  std::vector<size_t> order(split.train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    // Fisher-Yates permutation per epoch
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(
          shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }
    double sum_l = 0, sum_re = 0, sum_pre = 0, sum_kl = 0;
    int64_t steps = 0;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg.batch)) {
      size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
      std::vector<const TupleRecord*> batch;
      batch.reserve(stop - start);
      for (size_t i = start; i < stop; ++i) batch.push_back(&split.train[order[i]]);

      Tape tape;
      LeafCache leaves(tape, model.params);
      auto L = model.loss_total(leaves, batch, cfg.beta, cfg.eta, sample_rng);
      double l = L.total->value.data[0];
      if (!std::isfinite(l)) {
        json snap = {{"epoch", epoch + 1},
                     {"step", steps + 1},
                     {"loss", l},
                     {"loss_re", L.reconstruction->value.data[0]},
                     {"loss_pre", L.propagation->value.data[0]},
                     {"loss_kl", L.kl->value.data[0]},
                     {"batch", json::array()}};
        for (const TupleRecord* r : batch)
          snap["batch"].push_back(
              {{"k", r->k}, {"j", r->j}, {"i", r->i}, {"t", r->t}, {"tau", r->tau},
               {"zeta", r->zeta}});
        throw TrainingDiverged("training aborted: non-finite loss at epoch " +
                                   std::to_string(epoch + 1),
                               std::move(snap));
      }
      model.params.zero_grads();
      tape.backward(L.total);
      adam_step(model.params, adam, cfg.alpha);
      sum_l += l;
      sum_re += L.reconstruction->value.data[0];
      sum_pre += L.propagation->value.data[0];
      sum_kl += L.kl->value.data[0];
      ++steps;
    }
    double inv = 1.0 / static_cast<double>(steps);
    report.loss.push_back(sum_l * inv);
    report.loss_re.push_back(sum_re * inv);
    report.loss_pre.push_back(sum_pre * inv);
    report.loss_kl.push_back(sum_kl * inv);
    report.steps_per_epoch.push_back(steps);
    report.seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (on_epoch) on_epoch(epoch + 1, report);
  }
  return report;
}

// ---------------------------------------------------------------------------
// evaluation

/// Mean per-grid-point squared forecast error per validation zone, up to
/// n_samples records per zone (seeded subsample). Empty zones are reported
/// as absent.
inline ZoneMse evaluate_zones_with(
    const std::function<Tensor(const TupleRecord&)>& forecaster,
    const DatasetSplit& split, int64_t n_samples, uint64_t seed) {
  auto zone_mse = [&](const std::vector<TupleRecord>& zone,
                      uint64_t stream) -> std::optional<double> {
    if (zone.empty()) return std::nullopt;
    Rng rng = Rng::derive(seed, stream);
    std::vector<size_t> idx(zone.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (static_cast<int64_t>(zone.size()) > n_samples) {
      for (size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1],
                  idx[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
      idx.resize(static_cast<size_t>(n_samples));
    }
    double total = 0.0;
    for (size_t i : idx) {
      const TupleRecord& r = zone[i];
      Tensor pred = forecaster(r);
      double sq = 0.0;
      for (size_t e = 0; e < pred.data.size(); ++e) {
        double d = pred.data[e] - r.u_future.data[e];
        sq += d * d;
      }
      total += sq / static_cast<double>(pred.numel());
    }
    return total / static_cast<double>(idx.size());
  };
  ZoneMse out;
  out.interp = zone_mse(split.val_interp, 11);
  out.left_extrap = zone_mse(split.val_left_extrap, 12);
  out.right_extrap = zone_mse(split.val_right_extrap, 13);
  return out;
}

inline ZoneMse evaluate_zones(Model& model, const DatasetSplit& split,
                              int64_t n_samples, uint64_t seed) {
  if (!model.initialized()) throw UsageError("evaluate_zones: model not initialized");
  return evaluate_zones_with(
      [&](const TupleRecord& r) { return model.forecast(r.u_now, r.tau, r.zeta); },
      split, n_samples, seed);
}

// ---------------------------------------------------------------------------
// data-scaling study

struct ScalingResult {
  std::vector<std::pair<int64_t, double>> points;  // (dataset size, MSE)
  double slope = 0.0;                              // d log MSE / d log size
};

/// Fits the log-log slope of MSE against dataset size. `run` maps a dataset
/// size to the evaluation MSE of a model trained at that size (injected so
/// stub models can exercise the fit).
inline ScalingResult data_scaling_study(const std::vector<int64_t>& sizes,
                                        const std::function<double(int64_t)>& run) {
  if (sizes.size() < 2) throw ConfigError("scaling study: need >= 2 sizes");
  for (size_t i = 1; i < sizes.size(); ++i) {
    if (sizes[i] <= sizes[i - 1])
      throw ConfigError("scaling study: sizes must be strictly ascending");
  }
  ScalingResult out;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int64_t size : sizes) {
    double mse = run(size);
    out.points.emplace_back(size, mse);
    double x = std::log(static_cast<double>(size));
    double y = std::log(std::max(mse, 1e-300));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  double n = static_cast<double>(sizes.size());
  out.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return out;
}

}  // namespace flexi
