#pragma once

#include <chrono>

#include "flexi/baseline.hpp"
#include "flexi/model.hpp"

namespace flexi {

struct BenchStats {
  double median = 0.0, p10 = 0.0, p90 = 0.0;  // seconds
};

struct BenchResult {
  std::vector<int64_t> tau_steps;
  std::vector<BenchStats> flexi, baseline;  // parallel to tau_steps
  int64_t trials = 0;

  std::string to_csv() const {
    std::ostringstream out;
    out << "tau_steps,flexi_median,flexi_p10,flexi_p90,"
           "baseline_median,baseline_p10,baseline_p90\n";
    for (size_t i = 0; i < tau_steps.size(); ++i)
      out << tau_steps[i] << "," << flexi[i].median << "," << flexi[i].p10 << ","
          << flexi[i].p90 << "," << baseline[i].median << "," << baseline[i].p10
          << "," << baseline[i].p90 << "\n";
    return out.str();
  }
  json to_json() const {
    json rows = json::array();
    for (size_t i = 0; i < tau_steps.size(); ++i)
      rows.push_back({{"tau_steps", tau_steps[i]},
                      {"flexi", {{"median", flexi[i].median},
                                 {"p10", flexi[i].p10},
                                 {"p90", flexi[i].p90}}},
                      {"baseline", {{"median", baseline[i].median},
                                    {"p10", baseline[i].p10},
                                    {"p90", baseline[i].p90}}}});
    return {{"trials", trials}, {"results", rows}};
  }
};

namespace detail {

inline BenchStats bench_stats(std::vector<double> samples) {
  std::sort(samples.begin(), samples.end());
  auto pct = [&](double p) {
    double pos = p * static_cast<double>(samples.size() - 1);
    size_t lo = static_cast<size_t>(pos);
    size_t hi = std::min(lo + 1, samples.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return samples[lo] * (1.0 - frac) + samples[hi] * frac;
  };
  return {pct(0.5), pct(0.1), pct(0.9)};
}

}  // namespace detail

/// Times single-shot forecasting against the rolling baseline at each
/// horizon. The timed region covers forward computation only: checkpoint
/// loading, window priming and result export all happen outside it. The
/// first `warmup` trials per (system, horizon) are discarded.
inline BenchResult run_bench(Model& model, AELSTM& baseline, const Tensor& u_now,
                             const Tensor& window, double re, double dt,
                             const std::vector<int64_t>& tau_steps, int64_t trials,
                             int64_t warmup = 5) {
  if (trials < 30)
    throw ConfigError("bench: need at least 30 trials, got " +
                      std::to_string(trials));
  if (tau_steps.empty()) throw ConfigError("bench: no tau values given");
  for (int64_t s : tau_steps)
    if (s < 1) throw ConfigError("bench: tau steps must be >= 1");

  using clock = std::chrono::steady_clock;
  BenchResult out;
  out.trials = trials;
  AELSTM::State primed = baseline.prime_window(window, re);
  // Trials are interleaved across every (system, horizon) series so that a
  // transient machine slowdown inflates all medians proportionally instead of
  // whichever series happened to run during it, and the order within a round
  // is shuffled so no series systematically inherits the cache/allocator
  // state left by another.
  size_t k = tau_steps.size();
  std::vector<std::vector<double>> tf(k), tb(k);
  std::vector<std::pair<bool, size_t>> order;  // (is_baseline, tau index)
  for (size_t s = 0; s < k; ++s) {
    order.emplace_back(false, s);
    order.emplace_back(true, s);
  }
  Rng rng(0x5be7c4);
  for (int64_t trial = 0; trial < warmup + trials; ++trial) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
    for (auto [is_baseline, s] : order) {
      auto t0 = clock::now();
      volatile double sink =
          is_baseline
              ? baseline.rollout_from_state(primed, re, tau_steps[s]).data[0]
              : model.forecast(u_now, static_cast<double>(tau_steps[s]) * dt, re)
                    .data[0];
      auto t1 = clock::now();
      (void)sink;
      if (trial >= warmup)
        (is_baseline ? tb : tf)[s].push_back(
            std::chrono::duration<double>(t1 - t0).count());
    }
  }
  for (size_t s = 0; s < k; ++s) {
    out.tau_steps.push_back(tau_steps[s]);
    out.flexi.push_back(detail::bench_stats(std::move(tf[s])));
    out.baseline.push_back(detail::bench_stats(std::move(tb[s])));
  }
  return out;
}

}  // namespace flexi
