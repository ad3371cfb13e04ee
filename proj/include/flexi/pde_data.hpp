#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flexi/rng.hpp"
#include "flexi/tensor.hpp"

namespace flexi {

using nlohmann::json;

// ---------------------------------------------------------------------------
// configs

struct BurgersConfig {
  int64_t n = 128;               // spatial grid points over [0, L]
  double domain_length = 1.0;
  double dt = 0.004;
  std::array<double, 2> re_range{400.0, 2400.0};
  std::array<int64_t, 2> tau_steps_range{150, 450};
  std::array<double, 2> t0_range{0.0, 2.0};  // initial-time sampling window

  void validate() const {
    if (n < 2) throw ConfigError("burgers: n must be >= 2");
    if (dt <= 0) throw ConfigError("burgers: dt must be > 0");
    if (re_range[0] >= re_range[1]) throw ConfigError("burgers: re_range min < max required");
    if (tau_steps_range[0] > tau_steps_range[1])
      throw ConfigError("burgers: tau_steps_range min <= max required");
  }
  double dx() const { return domain_length / static_cast<double>(n - 1); }

  json to_json() const {
    return {{"pde", "burgers"},       {"n", n},
            {"domain_length", domain_length}, {"dt", dt},
            {"re_range", re_range},   {"tau_steps_range", tau_steps_range},
            {"t0_range", t0_range}};
  }
  static BurgersConfig from_json(const json& j) {
    BurgersConfig c;
    c.n = j.value("n", c.n);
    c.domain_length = j.value("domain_length", c.domain_length);
    c.dt = j.value("dt", c.dt);
    if (j.contains("re_range")) c.re_range = j.at("re_range");
    if (j.contains("tau_steps_range")) c.tau_steps_range = j.at("tau_steps_range");
    if (j.contains("t0_range")) c.t0_range = j.at("t0_range");
    c.validate();
    return c;
  }
};

struct AdvDiffConfig {
  int64_t nx = 32, ny = 32;      // desk-scale default; full scale uses 128x128
  double domain_lo = -2.0, domain_hi = 2.0;
  double dt = 0.004;
  double c = 1.0;
  std::array<double, 2> re_range{1.0, 10.0};
  std::array<int64_t, 2> tau_steps_range{150, 425};
  // Initial times are kept strictly positive (the closed form starts from a
  // point source) and small enough that the advected peak stays in-domain
  // over the longest horizon.
  std::array<double, 2> t0_range{0.05, 0.25};

  void validate() const {
    if (nx < 2 || ny < 2) throw ConfigError("advdiff: grid dims must be >= 2");
    if (dt <= 0) throw ConfigError("advdiff: dt must be > 0");
    if (!std::isfinite(c)) throw ConfigError("advdiff: c must be finite");
    if (re_range[0] < 1e-6) throw ConfigError("advdiff: re_range min must be >= 1e-6");
    if (re_range[0] >= re_range[1]) throw ConfigError("advdiff: re_range min < max required");
    if (t0_range[0] <= 0) throw ConfigError("advdiff: initial times must be > 0");
  }
  double dx() const { return (domain_hi - domain_lo) / static_cast<double>(nx - 1); }
  double dy() const { return (domain_hi - domain_lo) / static_cast<double>(ny - 1); }

  json to_json() const {
    return {{"pde", "advdiff"},     {"nx", nx},
            {"ny", ny},             {"domain_lo", domain_lo},
            {"domain_hi", domain_hi}, {"dt", dt},
            {"c", c},               {"re_range", re_range},
            {"tau_steps_range", tau_steps_range}, {"t0_range", t0_range}};
  }
  static AdvDiffConfig from_json(const json& j) {
    AdvDiffConfig c;
    c.nx = j.value("nx", c.nx);
    c.ny = j.value("ny", c.ny);
    c.domain_lo = j.value("domain_lo", c.domain_lo);
    c.domain_hi = j.value("domain_hi", c.domain_hi);
    c.dt = j.value("dt", c.dt);
    c.c = j.value("c", c.c);
    if (j.contains("re_range")) c.re_range = j.at("re_range");
    if (j.contains("tau_steps_range")) c.tau_steps_range = j.at("tau_steps_range");
    if (j.contains("t0_range")) c.t0_range = j.at("t0_range");
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// closed-form solutions

/// Viscous Burgers solution u = x / (t + 1 + sqrt((t+1)/t0) e^{Re x^2 / 4(t+1)})
/// with t0 = e^{Re/8}. The exponent is assembled in log space and clamped so
/// large Re x^2 underflows to the analytic x/(huge) ~ 0 branch instead of
/// overflowing.
inline double burgers_exact(double x, double t, double re) {
  if (re <= 0.0) throw std::domain_error("burgers_exact: re must be > 0");
  double tp1 = t + 1.0;
  // log of sqrt((t+1)/t0) * exp(re x^2 / (4(t+1)))
  double log_term = 0.5 * (std::log(tp1) - re / 8.0) + re * x * x / (4.0 * tp1);
  double denom = tp1 + std::exp(std::min(log_term, 700.0));
  return x / denom;
}

/// Advected Gaussian u = 1/(4 pi nu t) exp(-((x - c t)^2 + y^2) / (4 nu t)),
/// nu = 1/re.
inline double advdiff_exact(double x, double y, double t, double re, double c) {
  if (re <= 0.0) throw std::domain_error("advdiff_exact: re must be > 0");
  if (t <= 0.0)
    throw std::domain_error("advdiff_exact: t must be > 0 (point-source start)");
  double nu = 1.0 / re;
  double dx = x - c * t;
  return std::exp(-(dx * dx + y * y) / (4.0 * nu * t)) / (4.0 * M_PI * nu * t);
}

inline Tensor snapshot(const BurgersConfig& cfg, double t, double re) {
  Tensor u = Tensor::zeros({cfg.n});
  for (int64_t i = 0; i < cfg.n; ++i)
    u.data[static_cast<size_t>(i)] = burgers_exact(static_cast<double>(i) * cfg.dx(), t, re);
  return u;
}

/// Row-major [ny, nx]; element (iy, ix) samples (x = lo + ix dx, y = lo + iy dy).
inline Tensor snapshot(const AdvDiffConfig& cfg, double t, double re) {
  Tensor u = Tensor::zeros({cfg.ny, cfg.nx});
  for (int64_t iy = 0; iy < cfg.ny; ++iy) {
    double y = cfg.domain_lo + static_cast<double>(iy) * cfg.dy();
    for (int64_t ix = 0; ix < cfg.nx; ++ix) {
      double x = cfg.domain_lo + static_cast<double>(ix) * cfg.dx();
      u.data[static_cast<size_t>(iy * cfg.nx + ix)] = advdiff_exact(x, y, t, re, cfg.c);
    }
  }
  return u;
}

// ---------------------------------------------------------------------------
// dataset

struct TupleRecord {
  Tensor u_now;    // state at t
  Tensor u_future; // state at t + tau
  double t = 0.0;
  double tau = 0.0;   // physical seconds = steps * dt
  double zeta = 0.0;  // scalar Re
  uint32_t k = 0, j = 0, i = 0;
};

/// Sample K parameter values, J initial times per parameter, I horizons per
/// initial time. RNG streams are derived per index by counter splitting so
/// the result is independent of evaluation order.
template <class Config>
std::vector<TupleRecord> build_dataset(const Config& cfg, int64_t K, int64_t J,
                                       int64_t I, uint64_t seed) {
  cfg.validate();
  if (K < 1 || J < 1 || I < 1)
    throw ConfigError("build_dataset: K, J, I must be >= 1");
  std::vector<TupleRecord> out;
  out.reserve(static_cast<size_t>(K * J * I));
  for (int64_t k = 0; k < K; ++k) {
    Rng zr = Rng::derive(seed, static_cast<uint64_t>(k) * 0x10001ULL);
    double zeta = zr.uniform(cfg.re_range[0], cfg.re_range[1]);
    for (int64_t j = 0; j < J; ++j) {
      Rng tr = Rng::derive(seed, 0xA0000000ULL + static_cast<uint64_t>(k * J + j));
      double t = tr.uniform(cfg.t0_range[0], cfg.t0_range[1]);
      Tensor u_now = snapshot(cfg, t, zeta);
      for (int64_t i = 0; i < I; ++i) {
        Rng hr = Rng::derive(seed, 0xB0000000ULL +
                                       static_cast<uint64_t>((k * J + j) * I + i));
        int64_t steps = hr.uniform_int(cfg.tau_steps_range[0], cfg.tau_steps_range[1]);
        TupleRecord rec;
        rec.t = t;
        rec.tau = static_cast<double>(steps) * cfg.dt;
        rec.zeta = zeta;
        rec.k = static_cast<uint32_t>(k);
        rec.j = static_cast<uint32_t>(j);
        rec.i = static_cast<uint32_t>(i);
        rec.u_now = u_now;
        rec.u_future = snapshot(cfg, t + rec.tau, zeta);
        out.push_back(std::move(rec));
      }
    }
  }
  return out;
}

struct DatasetSplit {
  std::vector<TupleRecord> train;
  std::vector<TupleRecord> val_interp;
  std::vector<TupleRecord> val_left_extrap;
  std::vector<TupleRecord> val_right_extrap;
  double re_lo = 0, re_hi = 0, tplus_lo = 0, tplus_hi = 0;  // training box
};

/// Partition on the joint (zeta, t + tau) plane. The training region is the
/// axis-aligned box covering the central train_frac quantile mass per axis
/// (bounds inclusive). Records inside the box are split train_frac / rest
/// into train / interpolation validation; records outside are assigned to
/// left or right extrapolation — strictly below (above) on every out-of-box
/// axis goes left (right), mixed corners go to the nearer side by normalized
/// distance.
inline DatasetSplit split_dataset(const std::vector<TupleRecord>& records,
                                  double train_frac, uint64_t seed) {
  if (train_frac <= 0.0 || train_frac >= 1.0)
    throw ConfigError("split_dataset: train_frac must be in (0, 1)");
  if (records.size() < 10)
    throw ConfigError("split_dataset: need at least 10 records, got " +
                      std::to_string(records.size()));

  auto central_bounds = [&](auto&& key) {
    std::vector<double> v(records.size());
    for (size_t i = 0; i < records.size(); ++i) v[i] = key(records[i]);
    std::sort(v.begin(), v.end());
    double edge = (1.0 - train_frac) / 2.0;
    size_t last = v.size() - 1;
    size_t lo = static_cast<size_t>(std::floor(edge * static_cast<double>(last)));
    size_t hi = static_cast<size_t>(std::ceil((1.0 - edge) * static_cast<double>(last)));
    return std::array<double, 2>{v[lo], v[hi]};
  };
  auto re_b = central_bounds([](const TupleRecord& r) { return r.zeta; });
  auto tp_b = central_bounds([](const TupleRecord& r) { return r.t + r.tau; });

  DatasetSplit split;
  split.re_lo = re_b[0];
  split.re_hi = re_b[1];
  split.tplus_lo = tp_b[0];
  split.tplus_hi = tp_b[1];

  double re_span = std::max(re_b[1] - re_b[0], 1e-300);
  double tp_span = std::max(tp_b[1] - tp_b[0], 1e-300);

  Rng rng(seed);
  for (const TupleRecord& r : records) {
    double tp = r.t + r.tau;
    bool re_in = r.zeta >= re_b[0] && r.zeta <= re_b[1];
    bool tp_in = tp >= tp_b[0] && tp <= tp_b[1];
    if (re_in && tp_in) {
      if (rng.uniform01() < train_frac)
        split.train.push_back(r);
      else
        split.val_interp.push_back(r);
      continue;
    }
    // signed normalized overshoot per axis: negative below, positive above
    double d_re = r.zeta < re_b[0] ? (r.zeta - re_b[0]) / re_span
                  : r.zeta > re_b[1] ? (r.zeta - re_b[1]) / re_span
                                     : 0.0;
    double d_tp = tp < tp_b[0] ? (tp - tp_b[0]) / tp_span
                  : tp > tp_b[1] ? (tp - tp_b[1]) / tp_span
                                 : 0.0;
    if (d_re + d_tp < 0.0 || (d_re + d_tp == 0.0 && std::min(d_re, d_tp) < 0.0))
      split.val_left_extrap.push_back(r);
    else
      split.val_right_extrap.push_back(r);
  }
  return split;
}

// ---------------------------------------------------------------------------
// residual oracles

/// Max |u_t + u u_x - nu u_xx| over interior points of >= 3 consecutive
/// Burgers snapshots spaced dt apart; 2nd-order central differences.
inline double burgers_residual(const std::vector<Tensor>& snaps, double dt, double dx,
                               double nu) {
  if (snaps.size() < 3) throw UsageError("residual: need >= 3 snapshots");
  int64_t n = snaps[0].numel();
  double worst = 0.0;
  for (size_t s = 1; s + 1 < snaps.size(); ++s) {
    const auto& um = snaps[s - 1].data;
    const auto& u = snaps[s].data;
    const auto& up = snaps[s + 1].data;
    for (int64_t i = 1; i + 1 < n; ++i) {
      double ut = (up[i] - um[i]) / (2.0 * dt);
      double ux = (u[i + 1] - u[i - 1]) / (2.0 * dx);
      double uxx = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (dx * dx);
      worst = std::max(worst, std::abs(ut + u[i] * ux - nu * uxx));
    }
  }
  return worst;
}

/// Max |u_t + c u_x - nu (u_xx + u_yy)| over interior points.
inline double advdiff_residual(const std::vector<Tensor>& snaps, double dt, double dx,
                               double dy, double nu, double c) {
  if (snaps.size() < 3) throw UsageError("residual: need >= 3 snapshots");
  int64_t ny = snaps[0].dim(0), nx = snaps[0].dim(1);
  double worst = 0.0;
  for (size_t s = 1; s + 1 < snaps.size(); ++s) {
    const auto& um = snaps[s - 1].data;
    const auto& u = snaps[s].data;
    const auto& up = snaps[s + 1].data;
    for (int64_t iy = 1; iy + 1 < ny; ++iy)
      for (int64_t ix = 1; ix + 1 < nx; ++ix) {
        int64_t idx = iy * nx + ix;
        double ut = (up[idx] - um[idx]) / (2.0 * dt);
        double ux = (u[idx + 1] - u[idx - 1]) / (2.0 * dx);
        double uxx = (u[idx + 1] - 2.0 * u[idx] + u[idx - 1]) / (dx * dx);
        double uyy = (u[idx + nx] - 2.0 * u[idx] + u[idx - nx]) / (dy * dy);
        worst = std::max(worst, std::abs(ut + c * ux - nu * (uxx + uyy)));
      }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// dataset file IO: magic "FVDS", version u32, length-prefixed config JSON,
// record count u64, then per record k,j,i u32; t, tau, zeta f64; two
// length-prefixed f64 arrays (u_now, u_future), all little-endian.

namespace detail {

inline void write_u32le(std::ofstream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<char*>(b), 4);
}
inline void write_u64le(std::ofstream& out, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<char*>(b), 8);
}
inline void write_f64le(std::ofstream& out, double x) {
  uint64_t bits;
  std::memcpy(&bits, &x, 8);
  write_u64le(out, bits);
}
inline uint32_t read_u32le(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw UsageError("truncated dataset file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
inline uint64_t read_u64le(std::ifstream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw UsageError("truncated dataset file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}
inline double read_f64le(std::ifstream& in) {
  uint64_t bits = read_u64le(in);
  double x;
  std::memcpy(&x, &bits, 8);
  return x;
}
inline void write_array(std::ofstream& out, const Tensor& t) {
  write_u32le(out, static_cast<uint32_t>(t.numel()));
  for (double v : t.data) write_f64le(out, v);
}

}  // namespace detail

struct DatasetFile {
  json config;
  std::vector<TupleRecord> records;
};

inline void save_dataset(const std::string& file, const json& config,
                         const std::vector<TupleRecord>& records) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw UsageError("cannot open for writing: " + file);
  out.write("FVDS", 4);
  detail::write_u32le(out, 1);  // format version
  std::string cfg = config.dump();
  detail::write_u32le(out, static_cast<uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail::write_u64le(out, records.size());
  for (const TupleRecord& r : records) {
    detail::write_u32le(out, r.k);
    detail::write_u32le(out, r.j);
    detail::write_u32le(out, r.i);
    detail::write_f64le(out, r.t);
    detail::write_f64le(out, r.tau);
    detail::write_f64le(out, r.zeta);
    detail::write_array(out, r.u_now);
    detail::write_array(out, r.u_future);
  }
  if (!out) throw UsageError("write failed: " + file);
}

inline DatasetFile load_dataset(const std::string& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw UsageError("cannot open dataset file: " + file);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "FVDS", 4) != 0)
    throw UsageError("bad dataset file magic: " + file);
  uint32_t version = detail::read_u32le(in);
  if (version != 1)
    throw UsageError("unsupported dataset format version " + std::to_string(version));
  uint32_t cfg_len = detail::read_u32le(in);
  std::string cfg(cfg_len, '\0');
  in.read(cfg.data(), cfg_len);
  DatasetFile out;
  out.config = json::parse(cfg);
  uint64_t count = detail::read_u64le(in);
  // state shape from config so tensors round-trip with full rank
  Shape state_shape;
  if (out.config.value("pde", "") == "advdiff")
    state_shape = {out.config.value("ny", int64_t{0}), out.config.value("nx", int64_t{0})};
  out.records.reserve(count);
  for (uint64_t r = 0; r < count; ++r) {
    TupleRecord rec;
    rec.k = detail::read_u32le(in);
    rec.j = detail::read_u32le(in);
    rec.i = detail::read_u32le(in);
    rec.t = detail::read_f64le(in);
    rec.tau = detail::read_f64le(in);
    rec.zeta = detail::read_f64le(in);
    for (Tensor* t : {&rec.u_now, &rec.u_future}) {
      uint32_t len = detail::read_u32le(in);
      Shape s = state_shape.empty() ? Shape{static_cast<int64_t>(len)} : state_shape;
      if (shape_numel(s) != static_cast<int64_t>(len))
        throw UsageError("dataset record length does not match config grid");
      *t = Tensor::zeros(s);
      for (double& v : t->data) v = detail::read_f64le(in);
    }
    out.records.push_back(std::move(rec));
  }
  if (!in) throw UsageError("truncated dataset file: " + file);
  return out;
}

}  // namespace flexi
