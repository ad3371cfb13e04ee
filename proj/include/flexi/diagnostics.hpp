#pragma once

#include <functional>
#include <limits>

#include "flexi/model.hpp"

namespace flexi {

// ---------------------------------------------------------------------------
// reports

struct JacobianReport {
  Tensor z;                             // probe point [m]
  Tensor J;                             // [n, m]
  std::vector<double> singular_values;  // descending
  double frobenius = 0.0;
  double logdet_pullback = 0.0;         // sum 2 log sigma; -inf if any sigma = 0
};

struct LatentMap {
  std::vector<Tensor> points;        // latent grid points [m]
  std::vector<double> sharpness;     // max |u_{i+1} - u_i| / dx per point
  std::vector<double> peak_position; // argmax(u) * dx per point
  int64_t n1 = 0, n2 = 0;            // grid dims over the first two latent axes
};

struct IntrinsicDimEstimate {
  int64_t k = 0;
  double estimate = 0.0;
  std::vector<double> per_point;
};

// ---------------------------------------------------------------------------
// SVD via the m x m Gram matrix

struct SvdResult {
  std::vector<double> singular_values;  // descending
  Tensor right_vectors;                 // V, [m, m], columns match sigma order
};

/// sigma_j = sqrt(eig_j(J^T J)) via cyclic Jacobi rotations on the small Gram
/// matrix; adequate for the latent dimensions used here (m <= 8).
inline SvdResult jacobian_svd(const Tensor& J) {
  if (J.rank() != 2) throw DimensionError("jacobian_svd: expected [n, m]");
  int64_t n = J.dim(0), m = J.dim(1);
  if (m > 8)
    throw UsageError("jacobian_svd: latent dimension " + std::to_string(m) +
                     " unsupported (max 8)");
  // Gram matrix G = J^T J
  std::vector<double> g(static_cast<size_t>(m * m), 0.0);
  for (int64_t r = 0; r < n; ++r)
    for (int64_t a = 0; a < m; ++a)
      for (int64_t b = 0; b <= a; ++b)
        g[static_cast<size_t>(a * m + b)] +=
            J.data[static_cast<size_t>(r * m + a)] * J.data[static_cast<size_t>(r * m + b)];
  for (int64_t a = 0; a < m; ++a)
    for (int64_t b = a + 1; b < m; ++b)
      g[static_cast<size_t>(a * m + b)] = g[static_cast<size_t>(b * m + a)];

  std::vector<double> v(static_cast<size_t>(m * m), 0.0);
  for (int64_t i = 0; i < m; ++i) v[static_cast<size_t>(i * m + i)] = 1.0;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int64_t p = 0; p < m; ++p)
      for (int64_t q = p + 1; q < m; ++q)
        off += g[static_cast<size_t>(p * m + q)] * g[static_cast<size_t>(p * m + q)];
    if (off < 1e-30) break;
    for (int64_t p = 0; p < m; ++p)
      for (int64_t q = p + 1; q < m; ++q) {
        double gpq = g[static_cast<size_t>(p * m + q)];
        if (std::abs(gpq) < 1e-300) continue;
        double gpp = g[static_cast<size_t>(p * m + p)];
        double gqq = g[static_cast<size_t>(q * m + q)];
        double theta = 0.5 * std::atan2(2.0 * gpq, gpp - gqq);
        double c = std::cos(theta), s = std::sin(theta);
        for (int64_t i = 0; i < m; ++i) {
          double gip = g[static_cast<size_t>(i * m + p)];
          double giq = g[static_cast<size_t>(i * m + q)];
          g[static_cast<size_t>(i * m + p)] = c * gip + s * giq;
          g[static_cast<size_t>(i * m + q)] = -s * gip + c * giq;
        }
        for (int64_t i = 0; i < m; ++i) {
          double gpi = g[static_cast<size_t>(p * m + i)];
          double gqi = g[static_cast<size_t>(q * m + i)];
          g[static_cast<size_t>(p * m + i)] = c * gpi + s * gqi;
          g[static_cast<size_t>(q * m + i)] = -s * gpi + c * gqi;
        }
        for (int64_t i = 0; i < m; ++i) {
          double vip = v[static_cast<size_t>(i * m + p)];
          double viq = v[static_cast<size_t>(i * m + q)];
          v[static_cast<size_t>(i * m + p)] = c * vip + s * viq;
          v[static_cast<size_t>(i * m + q)] = -s * vip + c * viq;
        }
      }
  }
  std::vector<int64_t> order(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return g[static_cast<size_t>(a * m + a)] > g[static_cast<size_t>(b * m + b)];
  });
  SvdResult out;
  out.right_vectors = Tensor::zeros({m, m});
  for (int64_t col = 0; col < m; ++col) {
    int64_t src = order[static_cast<size_t>(col)];
    out.singular_values.push_back(
        std::sqrt(std::max(0.0, g[static_cast<size_t>(src * m + src)])));
    for (int64_t i = 0; i < m; ++i)
      out.right_vectors.data[static_cast<size_t>(i * m + col)] =
          v[static_cast<size_t>(i * m + src)];
  }
  return out;
}

/// log det(J^T J) = sum 2 log sigma_j; -inf sentinel when any sigma is 0.
inline double pullback_logdet(const std::vector<double>& singular_values) {
  double acc = 0.0;
  for (double s : singular_values) {
    if (s <= 0.0) return -std::numeric_limits<double>::infinity();
    acc += 2.0 * std::log(s);
  }
  return acc;
}

// ---------------------------------------------------------------------------
// decoder Jacobian

enum class JacobianMethod { autodiff, central_fd };

namespace detail {

inline JacobianReport finish_report(Tensor z, Tensor J) {
  JacobianReport rep;
  rep.z = std::move(z);
  rep.J = std::move(J);
  rep.singular_values = jacobian_svd(rep.J).singular_values;
  double fro2 = 0.0;
  for (double v : rep.J.data) fro2 += v * v;
  rep.frobenius = std::sqrt(fro2);
  rep.logdet_pullback = pullback_logdet(rep.singular_values);
  return rep;
}

}  // namespace detail

/// J[i][j] = d decode_i / d z_j at the given latent point. The autodiff path
/// runs one reverse sweep per output component; the finite-difference path
/// uses central differences with the given step.
inline JacobianReport decoder_jacobian(Model& model, const Tensor& z,
                                       JacobianMethod method = JacobianMethod::autodiff,
                                       double fd_step = 1e-5) {
  int64_t m = model.net.latent_dim;
  if (z.numel() != m) throw DimensionError("decoder_jacobian: latent length mismatch");
  int64_t n = shape_numel(model.net.state_shape);
  Tensor J = Tensor::zeros({n, m});
  if (method == JacobianMethod::autodiff) {
    Tensor z_leaf({1, m}, z.data);
    z_leaf.requires_grad = true;
    Tape tape;
    LeafCache p(tape, model.params);
    Var out = model.decode(p, tape.leaf(&z_leaf));
    for (int64_t i = 0; i < n; ++i) {
      z_leaf.zero_grad();
      tape.backward_component(out, i);
      for (int64_t j = 0; j < m; ++j)
        J.data[static_cast<size_t>(i * m + j)] = z_leaf.grad[static_cast<size_t>(j)];
    }
  } else {
    for (int64_t j = 0; j < m; ++j) {
      Tensor zp = z, zm = z;
      zp.data[static_cast<size_t>(j)] += fd_step;
      zm.data[static_cast<size_t>(j)] -= fd_step;
      Tensor up = model.decode_point(zp), um = model.decode_point(zm);
      for (int64_t i = 0; i < n; ++i)
        J.data[static_cast<size_t>(i * m + j)] =
            (up.data[static_cast<size_t>(i)] - um.data[static_cast<size_t>(i)]) /
            (2.0 * fd_step);
    }
  }
  return detail::finish_report(z, std::move(J));
}

/// Decoded response to +eps along each latent axis.
struct PerturbationProbe {
  std::vector<Tensor> deltas;  // decode(z + eps e_j) - decode(z), per axis
  std::vector<double> norms;
};

inline PerturbationProbe perturbation_probe(Model& model, const Tensor& z, double eps) {
  if (eps <= 0.0) throw ConfigError("perturbation_probe: eps must be > 0");
  int64_t m = model.net.latent_dim;
  Tensor base = model.decode_point(z);
  PerturbationProbe out;
  for (int64_t j = 0; j < m; ++j) {
    Tensor zp = z;
    zp.data[static_cast<size_t>(j)] += eps;
    Tensor up = model.decode_point(zp);
    Tensor delta = Tensor::zeros(base.shape);
    double norm2 = 0.0;
    for (size_t i = 0; i < base.data.size(); ++i) {
      delta.data[i] = up.data[i] - base.data[i];
      norm2 += delta.data[i] * delta.data[i];
    }
    out.deltas.push_back(std::move(delta));
    out.norms.push_back(std::sqrt(norm2));
  }
  return out;
}

/// Geometry at the encoded ground-truth future state vs the propagated
/// latent, plus each one's reconstruction MSE against u_future.
struct EncodedVsPropagated {
  JacobianReport encoded, propagated;  // at z-tilde and z-hat
  double mse_encoded = 0.0, mse_propagated = 0.0;
};

inline EncodedVsPropagated compare_encoded_vs_propagated(Model& model,
                                                         const TupleRecord& record) {
  Tensor z_tilde = model.encode_mean(record.u_future);
  Tensor z_now = model.encode_mean(record.u_now);
  Tensor z_hat = model.propagate_point(z_now, record.zeta, record.tau);
  EncodedVsPropagated out;
  out.encoded = decoder_jacobian(model, z_tilde);
  out.propagated = decoder_jacobian(model, z_hat);
  auto mse = [&](const Tensor& z) {
    Tensor u = model.decode_point(z);
    double acc = 0.0;
    for (size_t i = 0; i < u.data.size(); ++i) {
      double d = u.data[i] - record.u_future.data[i];
      acc += d * d;
    }
    return acc / static_cast<double>(u.numel());
  };
  out.mse_encoded = mse(z_tilde);
  out.mse_propagated = mse(z_hat);
  return out;
}

// ---------------------------------------------------------------------------
// latent grid map (1-d decoded fields)

struct LatentGridSpec {
  double z1_lo = -2.0, z1_hi = 2.0;
  double z2_lo = -2.0, z2_hi = 2.0;
  int64_t n1 = 16, n2 = 16;
};

/// Decodes a rectangular grid over the first two latent axes and tabulates
/// field sharpness and peak position. `decoder` is injectable so synthetic
/// fields can exercise the tabulation.
inline LatentMap latent_grid_map_with(const std::function<Tensor(const Tensor&)>& decoder,
                                      int64_t latent_dim, const LatentGridSpec& spec,
                                      double dx) {
  if (latent_dim < 2) throw ConfigError("latent_grid_map: needs latent_dim >= 2");
  if (spec.n1 < 1 || spec.n2 < 1) throw ConfigError("latent_grid_map: empty grid");
  LatentMap map;
  map.n1 = spec.n1;
  map.n2 = spec.n2;
  for (int64_t a = 0; a < spec.n1; ++a)
    for (int64_t b = 0; b < spec.n2; ++b) {
      Tensor z = Tensor::zeros({latent_dim});
      z.data[0] = spec.n1 == 1 ? spec.z1_lo
                               : spec.z1_lo + (spec.z1_hi - spec.z1_lo) *
                                                  static_cast<double>(a) /
                                                  static_cast<double>(spec.n1 - 1);
      z.data[1] = spec.n2 == 1 ? spec.z2_lo
                               : spec.z2_lo + (spec.z2_hi - spec.z2_lo) *
                                                  static_cast<double>(b) /
                                                  static_cast<double>(spec.n2 - 1);
      Tensor u = decoder(z);
      if (u.rank() != 1) throw DimensionError("latent_grid_map: expects 1-d fields");
      double sharp = 0.0;
      size_t arg = 0;
      for (size_t i = 0; i + 1 < u.data.size(); ++i)
        sharp = std::max(sharp, std::abs(u.data[i + 1] - u.data[i]) / dx);
      for (size_t i = 1; i < u.data.size(); ++i)
        if (u.data[i] > u.data[arg]) arg = i;
      map.points.push_back(std::move(z));
      map.sharpness.push_back(sharp);
      map.peak_position.push_back(static_cast<double>(arg) * dx);
    }
  return map;
}

inline LatentMap latent_grid_map(Model& model, const LatentGridSpec& spec, double dx) {
  return latent_grid_map_with(
      [&](const Tensor& z) { return model.decode_point(z); }, model.net.latent_dim,
      spec, dx);
}

// ---------------------------------------------------------------------------
// intrinsic dimension (Levina-Bickel MLE)

/// points: [N, n]. Per-point estimate over k nearest neighbors (brute force),
/// aggregated with the inverse-mean correction. Zero-distance duplicates are
/// excluded from a point's ratio terms.
inline IntrinsicDimEstimate intrinsic_dimension_mle(const Tensor& points, int64_t k) {
  if (points.rank() != 2) throw DimensionError("intrinsic_dimension_mle: expected [N, n]");
  int64_t N = points.dim(0), n = points.dim(1);
  if (k < 2 || N <= k)
    throw ConfigError("intrinsic_dimension_mle: need N > k >= 2");
  IntrinsicDimEstimate out;
  out.k = k;
  double inv_sum = 0.0;
  int64_t used = 0;
  std::vector<double> dist(static_cast<size_t>(N));
  for (int64_t a = 0; a < N; ++a) {
    const double* pa = &points.data[static_cast<size_t>(a * n)];
    for (int64_t b = 0; b < N; ++b) {
      if (b == a) {
        dist[static_cast<size_t>(b)] = std::numeric_limits<double>::infinity();
        continue;
      }
      const double* pb = &points.data[static_cast<size_t>(b * n)];
      double acc = 0.0;
      for (int64_t c = 0; c < n; ++c) {
        double d = pa[c] - pb[c];
        acc += d * d;
      }
      dist[static_cast<size_t>(b)] = std::sqrt(acc);
    }
    std::vector<double> nn(dist);
    std::nth_element(nn.begin(), nn.begin() + (k - 1), nn.end());
    nn.resize(static_cast<size_t>(k));
    std::sort(nn.begin(), nn.end());
    double tk = nn.back();
    if (tk <= 0.0) continue;  // all k neighbors coincide with this point
    double acc = 0.0;
    int64_t terms = 0;
    for (int64_t j = 0; j + 1 < k; ++j) {
      double tj = nn[static_cast<size_t>(j)];
      if (tj <= 0.0) continue;  // duplicate point, excluded
      acc += std::log(tk / tj);
      ++terms;
    }
    if (terms == 0 || acc <= 0.0) continue;
    double m_hat = static_cast<double>(terms) / acc;
    out.per_point.push_back(m_hat);
    inv_sum += 1.0 / m_hat;
    ++used;
  }
  if (used == 0) throw ConfigError("intrinsic_dimension_mle: no usable points");
  out.estimate = static_cast<double>(used) / inv_sum;
  return out;
}

}  // namespace flexi
