#pragma once

#include <algorithm>
#include <cmath>
#include <memory>

#include "flexi/tape.hpp"

namespace flexi {

enum class Act { relu, tanh, sigmoid };

namespace detail {

inline void check_finite(const Node& n) {
#ifndef NDEBUG
  for (double v : n.value.data) assert(std::isfinite(v) && "non-finite forward value");
#endif
  (void)n;
}

inline Tape& tape_of(Var a) { return *a->tape; }

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

inline Var add(Var a, Var b) {
  if (a->value.shape != b->value.shape)
    throw DimensionError("add: shape mismatch " + shape_str(a->value.shape) + " vs " +
                         shape_str(b->value.shape));
  auto fwd = [](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    const auto& y = self.inputs[1]->value.data;
    for (size_t i = 0; i < x.size(); ++i) self.value.data[i] = x[i] + y[i];
  };
  Var n = detail::tape_of(a).append("add", Tensor::zeros(a->value.shape), {a, b});
  n->fwd = fwd;
  n->fwd(*n);
  n->bwd = [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& in = *self.inputs[k];
      in.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
    }
  };
  detail::check_finite(*n);
  return n;
}

inline Var sub(Var a, Var b) {
  if (a->value.shape != b->value.shape)
    throw DimensionError("sub: shape mismatch");
  Var n = detail::tape_of(a).append("sub", Tensor::zeros(a->value.shape), {a, b});
  n->fwd = [](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    const auto& y = self.inputs[1]->value.data;
    for (size_t i = 0; i < x.size(); ++i) self.value.data[i] = x[i] - y[i];
  };
  n->fwd(*n);
  n->bwd = [](Node& self) {
    Node& ia = *self.inputs[0];
    Node& ib = *self.inputs[1];
    ia.ensure_grad();
    ib.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      ia.grad[i] += self.grad[i];
      ib.grad[i] -= self.grad[i];
    }
  };
  detail::check_finite(*n);
  return n;
}

inline Var mul(Var a, Var b) {
  if (a->value.shape != b->value.shape)
    throw DimensionError("mul: shape mismatch");
  Var n = detail::tape_of(a).append("mul", Tensor::zeros(a->value.shape), {a, b});
  n->fwd = [](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    const auto& y = self.inputs[1]->value.data;
    for (size_t i = 0; i < x.size(); ++i) self.value.data[i] = x[i] * y[i];
  };
  n->fwd(*n);
  n->bwd = [](Node& self) {
    Node& ia = *self.inputs[0];
    Node& ib = *self.inputs[1];
    ia.ensure_grad();
    ib.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      ia.grad[i] += self.grad[i] * ib.value.data[i];
      ib.grad[i] += self.grad[i] * ia.value.data[i];
    }
  };
  detail::check_finite(*n);
  return n;
}

inline Var scale(Var a, double c) {
  Var n = detail::tape_of(a).append("scale", Tensor::zeros(a->value.shape), {a});
  n->fwd = [c](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    for (size_t i = 0; i < x.size(); ++i) self.value.data[i] = c * x[i];
  };
  n->fwd(*n);
  n->bwd = [c](Node& self) {
    Node& in = *self.inputs[0];
    in.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += c * self.grad[i];
  };
  detail::check_finite(*n);
  return n;
}

inline Var vexp(Var a) {
  Var n = detail::tape_of(a).append("exp", Tensor::zeros(a->value.shape), {a});
  n->fwd = [](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    for (size_t i = 0; i < x.size(); ++i) self.value.data[i] = std::exp(x[i]);
  };
  n->fwd(*n);
  n->bwd = [](Node& self) {
    Node& in = *self.inputs[0];
    in.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      in.grad[i] += self.grad[i] * self.value.data[i];
  };
  detail::check_finite(*n);
  return n;
}

/// Clamp with pass-through gradient strictly inside (lo, hi), zero outside.
inline Var clamp(Var a, double lo, double hi) {
  Var n = detail::tape_of(a).append("clamp", Tensor::zeros(a->value.shape), {a});
  n->fwd = [lo, hi](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    for (size_t i = 0; i < x.size(); ++i) self.value.data[i] = std::clamp(x[i], lo, hi);
  };
  n->fwd(*n);
  n->bwd = [lo, hi](Node& self) {
    Node& in = *self.inputs[0];
    in.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double x = in.value.data[i];
      if (x > lo && x < hi) in.grad[i] += self.grad[i];
    }
  };
  detail::check_finite(*n);
  return n;
}

inline Var activation(Var a, Act kind) {
  Var n = detail::tape_of(a).append("activation", Tensor::zeros(a->value.shape), {a});
  n->fwd = [kind](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    auto& y = self.value.data;
    switch (kind) {
      case Act::relu:
        for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
        break;
      case Act::tanh:
        for (size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
        break;
      case Act::sigmoid:
        for (size_t i = 0; i < x.size(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
        break;
    }
  };
  n->fwd(*n);
  n->bwd = [kind](Node& self) {
    Node& in = *self.inputs[0];
    in.ensure_grad();
    const auto& y = self.value.data;
    switch (kind) {
      case Act::relu:
        // subgradient at 0 fixed to 0
        for (size_t i = 0; i < y.size(); ++i)
          if (in.value.data[i] > 0.0) in.grad[i] += self.grad[i];
        break;
      case Act::tanh:
        for (size_t i = 0; i < y.size(); ++i)
          in.grad[i] += self.grad[i] * (1.0 - y[i] * y[i]);
        break;
      case Act::sigmoid:
        for (size_t i = 0; i < y.size(); ++i)
          in.grad[i] += self.grad[i] * y[i] * (1.0 - y[i]);
        break;
    }
  };
  detail::check_finite(*n);
  return n;
}

// ---------------------------------------------------------------------------
// shape manipulation

inline Var reshape(Var a, Shape shape) {
  if (shape_numel(shape) != a->numel())
    throw DimensionError("reshape: numel mismatch " + shape_str(a->value.shape) + " -> " +
                         shape_str(shape));
  Var n = detail::tape_of(a).append("reshape", Tensor(shape, a->value.data), {a});
  n->fwd = [](Node& self) { self.value.data = self.inputs[0]->value.data; };
  n->bwd = [](Node& self) {
    Node& in = *self.inputs[0];
    in.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
  };
  return n;
}

/// Columns [from, to) of a [b x q] matrix.
inline Var slice_cols(Var a, int64_t from, int64_t to) {
  if (a->value.rank() != 2 || from < 0 || to > a->value.dim(1) || from >= to)
    throw DimensionError("slice_cols: bad range");
  int64_t b = a->value.dim(0), q = a->value.dim(1), w = to - from;
  Var n = detail::tape_of(a).append("slice_cols", Tensor::zeros({b, w}), {a});
  n->fwd = [from, q, w](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    int64_t b = self.value.dim(0);
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < w; ++j)
        self.value.data[i * w + j] = x[i * q + from + j];
  };
  n->fwd(*n);
  n->bwd = [from, q, w](Node& self) {
    Node& in = *self.inputs[0];
    in.ensure_grad();
    int64_t b = self.value.dim(0);
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < w; ++j)
        in.grad[i * q + from + j] += self.grad[i * w + j];
  };
  return n;
}

/// Horizontal concatenation of [b x qi] matrices.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: empty input");
  int64_t b = parts[0]->value.dim(0), total = 0;
  for (Var p : parts) {
    if (p->value.rank() != 2 || p->value.dim(0) != b)
      throw DimensionError("concat_cols: row mismatch");
    total += p->value.dim(1);
  }
  Var n = detail::tape_of(parts[0])
              .append("concat_cols", Tensor::zeros({b, total}), parts);
  n->fwd = [total](Node& self) {
    int64_t b = self.value.dim(0), off = 0;
    for (Node* in : self.inputs) {
      int64_t q = in->value.dim(1);
      for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < q; ++j)
          self.value.data[i * total + off + j] = in->value.data[i * q + j];
      off += q;
    }
  };
  n->fwd(*n);
  n->bwd = [total](Node& self) {
    int64_t b = self.value.dim(0), off = 0;
    for (Node* in : self.inputs) {
      in->ensure_grad();
      int64_t q = in->value.dim(1);
      for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < q; ++j)
          in->grad[i * q + j] += self.grad[i * total + off + j];
      off += q;
    }
  };
  return n;
}

/// Nearest-neighbor upsampling of [b, c, w] by an integer factor.
inline Var upsample1d(Var a, int64_t factor) {
  if (a->value.rank() != 3) throw DimensionError("upsample1d: expected [b,c,w]");
  int64_t b = a->value.dim(0), c = a->value.dim(1), w = a->value.dim(2);
  Var n = detail::tape_of(a).append("upsample1d", Tensor::zeros({b, c, w * factor}), {a});
  n->fwd = [factor, w](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    int64_t bc = self.value.dim(0) * self.value.dim(1);
    int64_t ow = w * factor;
    for (int64_t p = 0; p < bc; ++p)
      for (int64_t j = 0; j < ow; ++j)
        self.value.data[p * ow + j] = x[p * w + j / factor];
  };
  n->fwd(*n);
  n->bwd = [factor, w](Node& self) {
    Node& in = *self.inputs[0];
    in.ensure_grad();
    int64_t bc = self.value.dim(0) * self.value.dim(1);
    int64_t ow = w * factor;
    for (int64_t p = 0; p < bc; ++p)
      for (int64_t j = 0; j < ow; ++j)
        in.grad[p * w + j / factor] += self.grad[p * ow + j];
  };
  return n;
}

/// Nearest-neighbor upsampling of [b, c, h, w] by an integer factor.
inline Var upsample2d(Var a, int64_t factor) {
  if (a->value.rank() != 4) throw DimensionError("upsample2d: expected [b,c,h,w]");
  int64_t b = a->value.dim(0), c = a->value.dim(1), h = a->value.dim(2), w = a->value.dim(3);
  Var n = detail::tape_of(a).append(
      "upsample2d", Tensor::zeros({b, c, h * factor, w * factor}), {a});
  n->fwd = [factor, h, w](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    int64_t bc = self.value.dim(0) * self.value.dim(1);
    int64_t oh = h * factor, ow = w * factor;
    for (int64_t p = 0; p < bc; ++p)
      for (int64_t r = 0; r < oh; ++r)
        for (int64_t col = 0; col < ow; ++col)
          self.value.data[(p * oh + r) * ow + col] =
              x[(p * h + r / factor) * w + col / factor];
  };
  n->fwd(*n);
  n->bwd = [factor, h, w](Node& self) {
    Node& in = *self.inputs[0];
    in.ensure_grad();
    int64_t bc = self.value.dim(0) * self.value.dim(1);
    int64_t oh = h * factor, ow = w * factor;
    for (int64_t p = 0; p < bc; ++p)
      for (int64_t r = 0; r < oh; ++r)
        for (int64_t col = 0; col < ow; ++col)
          in.grad[(p * h + r / factor) * w + col / factor] +=
              self.grad[(p * oh + r) * ow + col];
  };
  return n;
}

// ---------------------------------------------------------------------------
// linear algebra

/// out[i,j] = sum_k input[i,k] * weight[k,j] + bias[j]
inline Var dense(Var input, Var weight, Var bias) {
  if (input->value.rank() != 2 || weight->value.rank() != 2 || bias->value.rank() != 1 ||
      input->value.dim(1) != weight->value.dim(0) ||
      weight->value.dim(1) != bias->value.dim(0))
    throw DimensionError("dense: nonconforming shapes input " +
                         shape_str(input->value.shape) + ", weight " +
                         shape_str(weight->value.shape) + ", bias " +
                         shape_str(bias->value.shape));
  int64_t b = input->value.dim(0), p = input->value.dim(1), q = weight->value.dim(1);
  Var n = detail::tape_of(input).append("dense", Tensor::zeros({b, q}),
                                        {input, weight, bias});
  n->fwd = [b, p, q](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    const auto& w = self.inputs[1]->value.data;
    const auto& bb = self.inputs[2]->value.data;
    auto& y = self.value.data;
    for (int64_t i = 0; i < b; ++i) {
      double* yr = &y[i * q];
      for (int64_t j = 0; j < q; ++j) yr[j] = bb[j];
      for (int64_t k = 0; k < p; ++k) {
        double xv = x[i * p + k];
        const double* wr = &w[k * q];
        for (int64_t j = 0; j < q; ++j) yr[j] += xv * wr[j];
      }
    }
  };
  n->fwd(*n);
  n->bwd = [b, p, q](Node& self) {
    Node& xi = *self.inputs[0];
    Node& wi = *self.inputs[1];
    Node& bi = *self.inputs[2];
    xi.ensure_grad();
    wi.ensure_grad();
    bi.ensure_grad();
    const auto& g = self.grad;
    const auto& x = xi.value.data;
    const auto& w = wi.value.data;
    for (int64_t i = 0; i < b; ++i) {
      const double* gr = &g[i * q];
      for (int64_t j = 0; j < q; ++j) bi.grad[j] += gr[j];
      for (int64_t k = 0; k < p; ++k) {
        const double* wr = &w[k * q];
        double acc = 0.0;
        double xv = x[i * p + k];
        double* wg = &wi.grad[k * q];
        for (int64_t j = 0; j < q; ++j) {
          acc += gr[j] * wr[j];
          wg[j] += xv * gr[j];
        }
        xi.grad[i * p + k] += acc;
      }
    }
  };
  detail::check_finite(*n);
  return n;
}

/// Cross-correlation of [b, c_in, w] with [c_out, c_in, k]; no kernel flip.
inline Var conv1d(Var input, Var kernel, int64_t stride, int64_t padding) {
  if (input->value.rank() != 3 || kernel->value.rank() != 3)
    throw DimensionError("conv1d: expected input [b,c_in,w], kernel [c_out,c_in,k]");
  int64_t b = input->value.dim(0), cin = input->value.dim(1), w = input->value.dim(2);
  int64_t cout = kernel->value.dim(0), k = kernel->value.dim(2);
  if (kernel->value.dim(1) != cin)
    throw DimensionError("conv1d: channel mismatch input " + shape_str(input->value.shape) +
                         " kernel " + shape_str(kernel->value.shape));
  if (stride < 1) throw ConfigError("conv1d: stride must be >= 1");
  if (k > w + 2 * padding)
    throw DimensionError("conv1d: kernel wider than padded input (" + std::to_string(k) +
                         " > " + std::to_string(w + 2 * padding) + ")");
  int64_t ow = (w + 2 * padding - k) / stride + 1;
  Var n = detail::tape_of(input).append("conv1d", Tensor::zeros({b, cout, ow}),
                                        {input, kernel});
  n->fwd = [=](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    const auto& kk = self.inputs[1]->value.data;
    auto& y = self.value.data;
    std::fill(y.begin(), y.end(), 0.0);
    for (int64_t ib = 0; ib < b; ++ib)
      for (int64_t co = 0; co < cout; ++co) {
        double* yr = &y[(ib * cout + co) * ow];
        for (int64_t ci = 0; ci < cin; ++ci) {
          const double* xr = &x[(ib * cin + ci) * w];
          const double* kr = &kk[(co * cin + ci) * k];
          // per-tap sweeps over the valid output range keep the inner loop
          // branch-free (and contiguous for stride 1)
          for (int64_t t = 0; t < k; ++t) {
            double kv = kr[t];
            // need 0 <= o*stride - padding + t < w
            int64_t o0 = padding - t <= 0
                             ? 0
                             : (padding - t + stride - 1) / stride;
            int64_t o1 = std::min(ow, (w - 1 - t + padding) / stride + 1);
            if (stride == 1) {
              const double* xs = xr + t - padding;
              for (int64_t o = o0; o < o1; ++o) yr[o] += xs[o] * kv;
            } else {
              for (int64_t o = o0; o < o1; ++o)
                yr[o] += xr[o * stride - padding + t] * kv;
            }
          }
        }
      }
  };
  n->fwd(*n);
  n->bwd = [=](Node& self) {
    Node& xi = *self.inputs[0];
    Node& ki = *self.inputs[1];
    xi.ensure_grad();
    ki.ensure_grad();
    const auto& g = self.grad;
    const auto& x = xi.value.data;
    const auto& kk = ki.value.data;
    for (int64_t ib = 0; ib < b; ++ib)
      for (int64_t co = 0; co < cout; ++co) {
        const double* gr = &g[(ib * cout + co) * ow];
        for (int64_t ci = 0; ci < cin; ++ci) {
          const double* xr = &x[(ib * cin + ci) * w];
          const double* kr = &kk[(co * cin + ci) * k];
          double* xg = &xi.grad[(ib * cin + ci) * w];
          double* kg = &ki.grad[(co * cin + ci) * k];
          for (int64_t o = 0; o < ow; ++o) {
            int64_t base = o * stride - padding;
            double gv = gr[o];
            if (gv == 0.0) continue;
            int64_t t0 = std::max<int64_t>(0, -base);
            int64_t t1 = std::min<int64_t>(k, w - base);
            for (int64_t t = t0; t < t1; ++t) {
              xg[base + t] += gv * kr[t];
              kg[t] += gv * xr[base + t];
            }
          }
        }
      }
  };
  detail::check_finite(*n);
  return n;
}

/// Cross-correlation of [b, c_in, h, w] with [c_out, c_in, kh, kw].
inline Var conv2d(Var input, Var kernel, int64_t stride, int64_t padding) {
  if (input->value.rank() != 4 || kernel->value.rank() != 4)
    throw DimensionError("conv2d: expected input [b,c_in,h,w], kernel [c_out,c_in,kh,kw]");
  int64_t b = input->value.dim(0), cin = input->value.dim(1);
  int64_t h = input->value.dim(2), w = input->value.dim(3);
  int64_t cout = kernel->value.dim(0), kh = kernel->value.dim(2), kw = kernel->value.dim(3);
  if (kernel->value.dim(1) != cin) throw DimensionError("conv2d: channel mismatch");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (kh > h + 2 * padding || kw > w + 2 * padding)
    throw DimensionError("conv2d: kernel larger than padded input");
  int64_t oh = (h + 2 * padding - kh) / stride + 1;
  int64_t ow = (w + 2 * padding - kw) / stride + 1;
  Var n = detail::tape_of(input).append("conv2d", Tensor::zeros({b, cout, oh, ow}),
                                        {input, kernel});
  n->fwd = [=](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    const auto& kk = self.inputs[1]->value.data;
    auto& y = self.value.data;
    std::fill(y.begin(), y.end(), 0.0);
    for (int64_t ib = 0; ib < b; ++ib)
      for (int64_t co = 0; co < cout; ++co)
        for (int64_t ci = 0; ci < cin; ++ci) {
          const double* xp = &x[((ib * cin + ci) * h) * w];
          const double* kp = &kk[((co * cin + ci) * kh) * kw];
          double* yp = &y[((ib * cout + co) * oh) * ow];
          for (int64_t or_ = 0; or_ < oh; ++or_) {
            int64_t rbase = or_ * stride - padding;
            int64_t r0 = std::max<int64_t>(0, -rbase);
            int64_t r1 = std::min<int64_t>(kh, h - rbase);
            for (int64_t oc = 0; oc < ow; ++oc) {
              int64_t cbase = oc * stride - padding;
              int64_t c0 = std::max<int64_t>(0, -cbase);
              int64_t c1 = std::min<int64_t>(kw, w - cbase);
              double acc = 0.0;
              for (int64_t r = r0; r < r1; ++r) {
                const double* xrow = &xp[(rbase + r) * w + cbase];
                const double* krow = &kp[r * kw];
                for (int64_t c = c0; c < c1; ++c) acc += xrow[c] * krow[c];
              }
              yp[or_ * ow + oc] += acc;
            }
          }
        }
  };
  n->fwd(*n);
  n->bwd = [=](Node& self) {
    Node& xi = *self.inputs[0];
    Node& ki = *self.inputs[1];
    xi.ensure_grad();
    ki.ensure_grad();
    const auto& g = self.grad;
    const auto& x = xi.value.data;
    const auto& kk = ki.value.data;
    for (int64_t ib = 0; ib < b; ++ib)
      for (int64_t co = 0; co < cout; ++co)
        for (int64_t ci = 0; ci < cin; ++ci) {
          const double* xp = &x[((ib * cin + ci) * h) * w];
          const double* kp = &kk[((co * cin + ci) * kh) * kw];
          double* xg = &xi.grad[((ib * cin + ci) * h) * w];
          double* kg = &ki.grad[((co * cin + ci) * kh) * kw];
          const double* gp = &g[((ib * cout + co) * oh) * ow];
          for (int64_t or_ = 0; or_ < oh; ++or_) {
            int64_t rbase = or_ * stride - padding;
            int64_t r0 = std::max<int64_t>(0, -rbase);
            int64_t r1 = std::min<int64_t>(kh, h - rbase);
            for (int64_t oc = 0; oc < ow; ++oc) {
              int64_t cbase = oc * stride - padding;
              double gv = gp[or_ * ow + oc];
              if (gv == 0.0) continue;
              int64_t c0 = std::max<int64_t>(0, -cbase);
              int64_t c1 = std::min<int64_t>(kw, w - cbase);
              for (int64_t r = r0; r < r1; ++r) {
                double* xrow = &xg[(rbase + r) * w + cbase];
                const double* xvrow = &xp[(rbase + r) * w + cbase];
                const double* krow = &kp[r * kw];
                double* kgrow = &kg[r * kw];
                for (int64_t c = c0; c < c1; ++c) {
                  xrow[c] += gv * krow[c];
                  kgrow[c] += gv * xvrow[c];
                }
              }
            }
          }
        }
  };
  detail::check_finite(*n);
  return n;
}

/// Broadcast per-channel bias over [b, c, ...spatial].
inline Var add_channel_bias(Var input, Var bias) {
  if (input->value.rank() < 2 || bias->value.rank() != 1 ||
      input->value.dim(1) != bias->value.dim(0))
    throw DimensionError("add_channel_bias: bias length must equal channel count");
  int64_t b = input->value.dim(0), c = input->value.dim(1);
  int64_t s = input->numel() / (b * c);
  Var n = detail::tape_of(input).append("add_channel_bias",
                                        Tensor::zeros(input->value.shape), {input, bias});
  n->fwd = [b, c, s](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    const auto& bb = self.inputs[1]->value.data;
    for (int64_t ib = 0; ib < b; ++ib)
      for (int64_t ic = 0; ic < c; ++ic) {
        double bv = bb[ic];
        const double* xr = &x[(ib * c + ic) * s];
        double* yr = &self.value.data[(ib * c + ic) * s];
        for (int64_t i = 0; i < s; ++i) yr[i] = xr[i] + bv;
      }
  };
  n->fwd(*n);
  n->bwd = [b, c, s](Node& self) {
    Node& xi = *self.inputs[0];
    Node& bi = *self.inputs[1];
    xi.ensure_grad();
    bi.ensure_grad();
    for (int64_t ib = 0; ib < b; ++ib)
      for (int64_t ic = 0; ic < c; ++ic) {
        const double* gr = &self.grad[(ib * c + ic) * s];
        double* xg = &xi.grad[(ib * c + ic) * s];
        double acc = 0.0;
        for (int64_t i = 0; i < s; ++i) {
          xg[i] += gr[i];
          acc += gr[i];
        }
        bi.grad[ic] += acc;
      }
  };
  return n;
}

/// Per-sample, per-group standardization of [b, c, ...spatial] followed by a
/// per-channel affine transform.
inline Var group_norm(Var input, int64_t groups, Var gamma, Var beta_shift, double eps) {
  if (input->value.rank() < 2) throw DimensionError("group_norm: expected [b,c,...]");
  int64_t b = input->value.dim(0), c = input->value.dim(1);
  if (c % groups != 0)
    throw ConfigError("group_norm: channels " + std::to_string(c) +
                      " not divisible by groups " + std::to_string(groups));
  if (eps <= 0.0) throw ConfigError("group_norm: eps must be > 0");
  if (gamma->value.numel() != c || beta_shift->value.numel() != c)
    throw DimensionError("group_norm: gamma/beta length must equal channel count");
  int64_t s = input->numel() / (b * c);     // spatial extent
  int64_t cg = c / groups;                  // channels per group
  int64_t gn = cg * s;                      // elements per group
  Var n = detail::tape_of(input).append("group_norm", Tensor::zeros(input->value.shape),
                                        {input, gamma, beta_shift});
  n->fwd = [=](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    const auto& gm = self.inputs[1]->value.data;
    const auto& bt = self.inputs[2]->value.data;
    for (int64_t ib = 0; ib < b; ++ib)
      for (int64_t ig = 0; ig < groups; ++ig) {
        const double* xg = &x[(ib * c + ig * cg) * s];
        double mean = 0.0;
        for (int64_t i = 0; i < gn; ++i) mean += xg[i];
        mean /= static_cast<double>(gn);
        double var = 0.0;
        for (int64_t i = 0; i < gn; ++i) {
          double d = xg[i] - mean;
          var += d * d;
        }
        var /= static_cast<double>(gn);
        double inv = 1.0 / std::sqrt(var + eps);
        double* yg = &self.value.data[(ib * c + ig * cg) * s];
        for (int64_t lc = 0; lc < cg; ++lc) {
          double gmv = gm[ig * cg + lc], btv = bt[ig * cg + lc];
          for (int64_t i = 0; i < s; ++i) {
            int64_t e = lc * s + i;
            yg[e] = gmv * (xg[e] - mean) * inv + btv;
          }
        }
      }
  };
  n->fwd(*n);
  n->bwd = [=](Node& self) {
    Node& xi = *self.inputs[0];
    Node& gi = *self.inputs[1];
    Node& bi = *self.inputs[2];
    xi.ensure_grad();
    gi.ensure_grad();
    bi.ensure_grad();
    const auto& x = xi.value.data;
    const auto& gm = gi.value.data;
    std::vector<double> xhat(static_cast<size_t>(gn));
    std::vector<double> hg(static_cast<size_t>(gn));
    for (int64_t ib = 0; ib < b; ++ib)
      for (int64_t ig = 0; ig < groups; ++ig) {
        const double* xg = &x[(ib * c + ig * cg) * s];
        const double* gg = &self.grad[(ib * c + ig * cg) * s];
        double mean = 0.0;
        for (int64_t i = 0; i < gn; ++i) mean += xg[i];
        mean /= static_cast<double>(gn);
        double var = 0.0;
        for (int64_t i = 0; i < gn; ++i) {
          double d = xg[i] - mean;
          var += d * d;
        }
        var /= static_cast<double>(gn);
        double inv = 1.0 / std::sqrt(var + eps);
        double hmean = 0.0, hxmean = 0.0;
        for (int64_t lc = 0; lc < cg; ++lc) {
          double gmv = gm[ig * cg + lc];
          for (int64_t i = 0; i < s; ++i) {
            int64_t e = lc * s + i;
            xhat[e] = (xg[e] - mean) * inv;
            hg[e] = gg[e] * gmv;
            hmean += hg[e];
            hxmean += hg[e] * xhat[e];
            gi.grad[ig * cg + lc] += gg[e] * xhat[e];
            bi.grad[ig * cg + lc] += gg[e];
          }
        }
        hmean /= static_cast<double>(gn);
        hxmean /= static_cast<double>(gn);
        double* xgr = &xi.grad[(ib * c + ig * cg) * s];
        for (int64_t e = 0; e < gn; ++e)
          xgr[e] += inv * (hg[e] - hmean - xhat[e] * hxmean);
      }
  };
  detail::check_finite(*n);
  return n;
}

// ---------------------------------------------------------------------------
// LSTM cell

/// Standard LSTM cell. Gate layout in the 4q dimension is [i f g o]; weights
/// follow w_ih [4q x p], w_hh [4q x q]. Returns [b, 2q] holding h' in the
/// first q columns and c' in the rest (split with lstm_h / lstm_c).
inline Var lstm_cell(Var x, Var h, Var c, Var w_ih, Var w_hh, Var b_ih, Var b_hh) {
  if (x->value.rank() != 2 || h->value.rank() != 2 || c->value.rank() != 2)
    throw DimensionError("lstm_cell: expected 2-d x, h, c");
  int64_t b = x->value.dim(0), p = x->value.dim(1), q = h->value.dim(1);
  if (h->value.dim(0) != b || c->value.dim(0) != b || c->value.dim(1) != q ||
      w_ih->value.shape != Shape{4 * q, p} || w_hh->value.shape != Shape{4 * q, q} ||
      b_ih->value.numel() != 4 * q || b_hh->value.numel() != 4 * q)
    throw DimensionError("lstm_cell: nonconforming shapes (x " + shape_str(x->value.shape) +
                         ", h " + shape_str(h->value.shape) + ", w_ih " +
                         shape_str(w_ih->value.shape) + ")");
  auto gates = std::make_shared<std::vector<double>>(static_cast<size_t>(b * 4 * q));
  Var n = detail::tape_of(x).append("lstm_cell", Tensor::zeros({b, 2 * q}),
                                    {x, h, c, w_ih, w_hh, b_ih, b_hh});
  n->fwd = [b, p, q, gates](Node& self) {
    const auto& xv = self.inputs[0]->value.data;
    const auto& hv = self.inputs[1]->value.data;
    const auto& cv = self.inputs[2]->value.data;
    const auto& wih = self.inputs[3]->value.data;
    const auto& whh = self.inputs[4]->value.data;
    const auto& bih = self.inputs[5]->value.data;
    const auto& bhh = self.inputs[6]->value.data;
    auto& g = *gates;
    for (int64_t ib = 0; ib < b; ++ib) {
      double* zr = &g[ib * 4 * q];
      for (int64_t j = 0; j < 4 * q; ++j) {
        double acc = bih[j] + bhh[j];
        const double* wi = &wih[j * p];
        const double* wh = &whh[j * q];
        const double* xr = &xv[ib * p];
        const double* hr = &hv[ib * q];
        for (int64_t k = 0; k < p; ++k) acc += wi[k] * xr[k];
        for (int64_t k = 0; k < q; ++k) acc += wh[k] * hr[k];
        zr[j] = acc;
      }
      for (int64_t j = 0; j < q; ++j) {
        double gi = 1.0 / (1.0 + std::exp(-zr[j]));
        double gf = 1.0 / (1.0 + std::exp(-zr[q + j]));
        double gg = std::tanh(zr[2 * q + j]);
        double go = 1.0 / (1.0 + std::exp(-zr[3 * q + j]));
        zr[j] = gi;
        zr[q + j] = gf;
        zr[2 * q + j] = gg;
        zr[3 * q + j] = go;
        double cn = gf * cv[ib * q + j] + gi * gg;
        self.value.data[ib * 2 * q + q + j] = cn;
        self.value.data[ib * 2 * q + j] = go * std::tanh(cn);
      }
    }
  };
  n->fwd(*n);
  n->bwd = [b, p, q, gates](Node& self) {
    Node& xi = *self.inputs[0];
    Node& hi = *self.inputs[1];
    Node& ci = *self.inputs[2];
    Node& wihn = *self.inputs[3];
    Node& whhn = *self.inputs[4];
    Node& bihn = *self.inputs[5];
    Node& bhhn = *self.inputs[6];
    for (Node* in : self.inputs) in->ensure_grad();
    const auto& g = *gates;
    std::vector<double> dz(static_cast<size_t>(4 * q));
    for (int64_t ib = 0; ib < b; ++ib) {
      const double* zr = &g[ib * 4 * q];
      for (int64_t j = 0; j < q; ++j) {
        double gi = zr[j], gf = zr[q + j], gg = zr[2 * q + j], go = zr[3 * q + j];
        double cn = self.value.data[ib * 2 * q + q + j];
        double tc = std::tanh(cn);
        double dh = self.grad[ib * 2 * q + j];
        double dcn = self.grad[ib * 2 * q + q + j] + dh * go * (1.0 - tc * tc);
        double d_o = dh * tc;
        double d_i = dcn * gg;
        double d_f = dcn * ci.value.data[ib * q + j];
        double d_g = dcn * gi;
        ci.grad[ib * q + j] += dcn * gf;
        dz[j] = d_i * gi * (1.0 - gi);
        dz[q + j] = d_f * gf * (1.0 - gf);
        dz[2 * q + j] = d_g * (1.0 - gg * gg);
        dz[3 * q + j] = d_o * go * (1.0 - go);
      }
      const double* xr = &xi.value.data[ib * p];
      const double* hr = &hi.value.data[ib * q];
      for (int64_t j = 0; j < 4 * q; ++j) {
        double dzj = dz[j];
        bihn.grad[j] += dzj;
        bhhn.grad[j] += dzj;
        const double* wi = &wihn.value.data[j * p];
        const double* wh = &whhn.value.data[j * q];
        double* wig = &wihn.grad[j * p];
        double* whg = &whhn.grad[j * q];
        for (int64_t k = 0; k < p; ++k) {
          xi.grad[ib * p + k] += dzj * wi[k];
          wig[k] += dzj * xr[k];
        }
        for (int64_t k = 0; k < q; ++k) {
          hi.grad[ib * q + k] += dzj * wh[k];
          whg[k] += dzj * hr[k];
        }
      }
    }
  };
  detail::check_finite(*n);
  return n;
}

inline Var lstm_h(Var hc) { return slice_cols(hc, 0, hc->value.dim(1) / 2); }
inline Var lstm_c(Var hc) {
  return slice_cols(hc, hc->value.dim(1) / 2, hc->value.dim(1));
}

// ---------------------------------------------------------------------------
// reductions and losses

inline Var sum(Var a) {
  Var n = detail::tape_of(a).append("sum", Tensor::scalar(0.0), {a});
  n->fwd = [](Node& self) {
    double acc = 0.0;
    for (double v : self.inputs[0]->value.data) acc += v;
    self.value.data[0] = acc;
  };
  n->fwd(*n);
  n->bwd = [](Node& self) {
    Node& in = *self.inputs[0];
    in.ensure_grad();
    double g = self.grad[0];
    for (double& v : in.grad) v += g;
  };
  return n;
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a->numel())); }

/// Fused sum of squared differences, Σ (a-b)^2.
inline Var sum_sq_diff(Var a, Var b) {
  if (a->value.shape != b->value.shape) throw DimensionError("sum_sq_diff: shape mismatch");
  Var n = detail::tape_of(a).append("sum_sq_diff", Tensor::scalar(0.0), {a, b});
  n->fwd = [](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    const auto& y = self.inputs[1]->value.data;
    double acc = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
      double d = x[i] - y[i];
      acc += d * d;
    }
    self.value.data[0] = acc;
  };
  n->fwd(*n);
  n->bwd = [](Node& self) {
    Node& ia = *self.inputs[0];
    Node& ib = *self.inputs[1];
    ia.ensure_grad();
    ib.ensure_grad();
    double g = self.grad[0];
    for (size_t i = 0; i < ia.grad.size(); ++i) {
      double d = 2.0 * (ia.value.data[i] - ib.value.data[i]) * g;
      ia.grad[i] += d;
      ib.grad[i] -= d;
    }
  };
  detail::check_finite(*n);
  return n;
}

/// Batch-mean Gaussian KL against the standard normal prior:
/// (1/b) Σ_samples -1/2 Σ_j (1 + logvar_j - mu_j^2 - exp(logvar_j)).
inline Var kl_divergence(Var mu, Var log_var) {
  if (mu->value.shape != log_var->value.shape)
    throw DimensionError("kl_divergence: shape mismatch");
  int64_t b = mu->value.rank() == 2 ? mu->value.dim(0) : 1;
  Var n = detail::tape_of(mu).append("kl_divergence", Tensor::scalar(0.0), {mu, log_var});
  n->fwd = [b](Node& self) {
    const auto& m = self.inputs[0]->value.data;
    const auto& lv = self.inputs[1]->value.data;
    double acc = 0.0;
    for (size_t i = 0; i < m.size(); ++i)
      acc += -0.5 * (1.0 + lv[i] - m[i] * m[i] - std::exp(lv[i]));
    self.value.data[0] = acc / static_cast<double>(b);
  };
  n->fwd(*n);
  n->bwd = [b](Node& self) {
    Node& mi = *self.inputs[0];
    Node& li = *self.inputs[1];
    mi.ensure_grad();
    li.ensure_grad();
    double g = self.grad[0] / static_cast<double>(b);
    for (size_t i = 0; i < mi.grad.size(); ++i) {
      mi.grad[i] += g * mi.value.data[i];
      li.grad[i] += g * 0.5 * (std::exp(li.value.data[i]) - 1.0);
    }
  };
  return n;
}

}  // namespace flexi
