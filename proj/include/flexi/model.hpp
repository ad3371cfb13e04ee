#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "flexi/ops.hpp"
#include "flexi/param_store.hpp"
#include "flexi/pde_data.hpp"
#include "flexi/rng.hpp"

namespace flexi {

// ---------------------------------------------------------------------------
// configs

struct EncoderDecoderConfig {
  Shape state_shape{128};           // [n] for 1-d fields, [h, w] for 2-d
  int64_t latent_dim = 2;
  std::vector<int64_t> channels{16, 32, 64};
  int64_t kernel = 5;               // use 3 for 2-d states
  int64_t stride = 2;
  int64_t groups = 4;
  std::vector<int64_t> head_widths{128};

  bool is_2d() const { return state_shape.size() == 2; }
  void validate() const {
    if (latent_dim < 1) throw ConfigError("model: latent_dim must be >= 1");
    if (channels.empty()) throw ConfigError("model: channels must be nonempty");
    if (state_shape.empty() || state_shape.size() > 2)
      throw ConfigError("model: state must be 1-d or 2-d");
    for (int64_t c : channels)
      if (c % groups != 0)
        throw ConfigError("model: every channel count must divide by groups");
    int64_t w = state_shape.back();
    for (size_t i = 0; i < channels.size(); ++i) {
      if (w % stride != 0)
        throw ConfigError("model: state width must halve cleanly through the stack");
      w /= stride;
    }
  }

  json to_json() const {
    return {{"state_shape", state_shape}, {"latent_dim", latent_dim},
            {"channels", channels},       {"kernel", kernel},
            {"stride", stride},           {"groups", groups},
            {"head_widths", head_widths}};
  }
  static EncoderDecoderConfig from_json(const json& j) {
    EncoderDecoderConfig c;
    c.state_shape = j.value("state_shape", c.state_shape);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.channels = j.value("channels", c.channels);
    c.kernel = j.value("kernel", c.kernel);
    c.stride = j.value("stride", c.stride);
    c.groups = j.value("groups", c.groups);
    c.head_widths = j.value("head_widths", c.head_widths);
    c.validate();
    return c;
  }

  static EncoderDecoderConfig burgers_default() { return EncoderDecoderConfig{}; }
  static EncoderDecoderConfig advdiff_default(int64_t grid = 32) {
    EncoderDecoderConfig c;
    c.state_shape = {grid, grid};
    c.latent_dim = 3;
    c.kernel = 3;
    return c;
  }
};

enum class PropagatorKind { DCP, PEP };

struct PropagatorConfig {
  PropagatorKind kind = PropagatorKind::DCP;
  std::vector<int64_t> hidden{64, 64};
  int64_t embedding_dim = 64;   // PEP only; must be even and > latent_dim
  double zeta_scale = 2400.0;   // normalization divisors
  double tau_scale = 1.8;       // 450 steps * dt for Burgers defaults
  double pe_input_scale = 100.0;  // PE consumes (value/scale) * pe_input_scale

  void validate(int64_t m) const {
    for (int64_t h : hidden)
      if (h < 1) throw ConfigError("propagator: widths must be positive");
    if (kind == PropagatorKind::PEP) {
      if (embedding_dim % 2 != 0)
        throw ConfigError("propagator: embedding_dim must be even");
      if (embedding_dim <= m)
        throw ConfigError("propagator: embedding_dim must exceed latent_dim");
    }
    if (zeta_scale <= 0 || tau_scale <= 0)
      throw ConfigError("propagator: scales must be positive");
  }

  json to_json() const {
    return {{"kind", kind == PropagatorKind::DCP ? "dcp" : "pep"},
            {"hidden", hidden},
            {"embedding_dim", embedding_dim},
            {"zeta_scale", zeta_scale},
            {"tau_scale", tau_scale},
            {"pe_input_scale", pe_input_scale}};
  }
  static PropagatorConfig from_json(const json& j) {
    PropagatorConfig c;
    std::string kind = j.value("kind", "dcp");
    c.kind = kind == "pep" ? PropagatorKind::PEP : PropagatorKind::DCP;
    c.hidden = j.value("hidden", c.hidden);
    c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
    c.zeta_scale = j.value("zeta_scale", c.zeta_scale);
    c.tau_scale = j.value("tau_scale", c.tau_scale);
    c.pe_input_scale = j.value("pe_input_scale", c.pe_input_scale);
    return c;
  }
};

struct LatentSample {
  Tensor mu, log_var, z, epsilon;  // each [b, m]
};

/// Sinusoidal embedding: out[2f] = sin(v w_f), out[2f+1] = cos(v w_f) with
/// w_f = 1 / 10000^{2f/d}.
inline std::vector<double> positional_encoding(double value, int64_t d) {
  if (d % 2 != 0) throw ConfigError("positional_encoding: d must be even");
  std::vector<double> out(static_cast<size_t>(d));
  for (int64_t f = 0; f < d / 2; ++f) {
    double w = std::pow(10000.0, -2.0 * static_cast<double>(f) / static_cast<double>(d));
    out[static_cast<size_t>(2 * f)] = std::sin(value * w);
    out[static_cast<size_t>(2 * f + 1)] = std::cos(value * w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// model

/// Resolves parameter tensors to tape leaves, one leaf per parameter per
/// tape, so the reconstruction and forecast paths share the same nodes.
///
/// In borrow mode each leaf takes ownership of the parameter's storage for
/// the cache's lifetime instead of copying it, and the destructor moves the
/// storage back. Use only on inference paths where the parameters are not
/// read elsewhere while the cache is alive, and declare the cache after the
/// tape so it is destroyed first.
class LeafCache {
 public:
  enum class Mode { copy, borrow };
  LeafCache(Tape& tape, ParameterStore& params, Mode mode = Mode::copy)
      : tape_(tape), params_(params), mode_(mode) {}
  ~LeafCache() {
    if (mode_ == Mode::borrow)
      for (auto& [path, v] : leaves_)
        params_.at(path).data = std::move(v->value.data);
  }
  LeafCache(const LeafCache&) = delete;
  LeafCache& operator=(const LeafCache&) = delete;
  Var operator()(const std::string& path) {
    auto it = leaves_.find(path);
    if (it != leaves_.end()) return it->second;
    Tensor* t = &params_.at(path);
    Var v = mode_ == Mode::borrow ? tape_.leaf_borrowed(t) : tape_.leaf(t);
    leaves_.emplace(path, v);
    return v;
  }
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  ParameterStore& params_;
  Mode mode_;
  std::map<std::string, Var> leaves_;
};

class Model {
 public:
  EncoderDecoderConfig net;
  PropagatorConfig prop;
  ParameterStore params;

  // forward-pass instrumentation (counts network evaluations, not taus)
  mutable size_t encoder_evals = 0, decoder_evals = 0, propagator_evals = 0;

  Model() = default;
  Model(EncoderDecoderConfig n, PropagatorConfig p, uint64_t seed) : net(n), prop(p) {
    net.validate();
    prop.validate(net.latent_dim);
    init_params(seed);
  }

  bool initialized() const { return params.size() > 0; }

  // -- graph builders -------------------------------------------------------

  /// u: [b, *state_shape] -> (mu [b,m], log_var [b,m]); log_var clamped to
  /// [-10, 10] for numerical safety.
  std::pair<Var, Var> encode(LeafCache& p, Var u) {
    require_init();
    check_state_batch(u);
    ++encoder_evals;
    int64_t b = u->value.dim(0);
    Var x = net.is_2d()
                ? reshape(u, {b, 1, net.state_shape[0], net.state_shape[1]})
                : reshape(u, {b, 1, net.state_shape[0]});
    int64_t cin = 1;
    for (size_t l = 0; l < net.channels.size(); ++l) {
      std::string tag = "encoder/conv" + std::to_string(l);
      Var c = net.is_2d()
                  ? conv2d(x, p(tag + "/kernel"), net.stride, net.kernel / 2)
                  : conv1d(x, p(tag + "/kernel"), net.stride, net.kernel / 2);
      c = add_channel_bias(c, p(tag + "/bias"));
      std::string gn = "encoder/gn" + std::to_string(l);
      c = group_norm(c, net.groups, p(gn + "/gamma"), p(gn + "/beta"), 1e-5);
      x = activation(c, Act::relu);
      cin = net.channels[l];
    }
    Var flat = reshape(x, {b, flattened_size()});
    for (size_t l = 0; l < net.head_widths.size(); ++l) {
      std::string tag = "encoder/fc" + std::to_string(l);
      flat = activation(dense(flat, p(tag + "/w"), p(tag + "/b")), Act::relu);
    }
    Var head = dense(flat, p("encoder/head/w"), p("encoder/head/b"));
    Var mu = slice_cols(head, 0, net.latent_dim);
    Var log_var = clamp(slice_cols(head, net.latent_dim, 2 * net.latent_dim), -10.0, 10.0);
    return {mu, log_var};
  }

  /// z: [b, m] -> [b, *state_shape]; one decoder instance shared by the
  /// reconstruction and forecast paths (LeafCache hands back the same
  /// parameter leaves).
  Var decode(LeafCache& p, Var z) {
    require_init();
    if (z->value.rank() != 2 || z->value.dim(1) != net.latent_dim)
      throw DimensionError("decode: expected [b, " + std::to_string(net.latent_dim) +
                           "], got " + shape_str(z->value.shape));
    ++decoder_evals;
    int64_t b = z->value.dim(0);
    Var x = z;
    size_t nfc = net.head_widths.size();
    for (size_t l = 0; l < nfc; ++l) {
      std::string tag = "decoder/fc" + std::to_string(l);
      x = activation(dense(x, p(tag + "/w"), p(tag + "/b")), Act::relu);
    }
    std::string tag = "decoder/fc" + std::to_string(nfc);
    x = activation(dense(x, p(tag + "/w"), p(tag + "/b")), Act::relu);
    int64_t cb = net.channels.back();
    int64_t base = bottom_width();
    x = net.is_2d() ? reshape(x, {b, cb, base, base}) : reshape(x, {b, cb, base});
    int64_t n_up = static_cast<int64_t>(net.channels.size());
    for (int64_t l = 0; l < n_up; ++l) {
      x = net.is_2d() ? upsample2d(x, net.stride) : upsample1d(x, net.stride);
      std::string ct = "decoder/conv" + std::to_string(l);
      Var c = net.is_2d() ? conv2d(x, p(ct + "/kernel"), 1, net.kernel / 2)
                          : conv1d(x, p(ct + "/kernel"), 1, net.kernel / 2);
      c = add_channel_bias(c, p(ct + "/bias"));
      if (l + 1 < n_up) {
        std::string gn = "decoder/gn" + std::to_string(l);
        c = group_norm(c, net.groups, p(gn + "/gamma"), p(gn + "/beta"), 1e-5);
        x = activation(c, Act::relu);
      } else {
        x = c;  // final layer linear, single output channel
      }
    }
    Shape out = {b};
    for (int64_t d : net.state_shape) out.push_back(d);
    return reshape(x, out);
  }

  /// z = mu + exp(0.5 log_var) * eps, eps ~ N(0, I) as a tape constant so
  /// gradients flow to mu and log_var only.
  Var reparameterize(LeafCache& p, Var mu, Var log_var, Rng& rng,
                     LatentSample* out = nullptr) {
    Tensor eps = Tensor::zeros(mu->value.shape);
    for (double& v : eps.data) v = rng.normal();
    Var sigma = vexp(scale(log_var, 0.5));
    Var z = add(mu, mul(sigma, p.tape().constant(eps)));
    if (out) {
      out->mu = mu->value;
      out->log_var = log_var->value;
      out->epsilon = eps;
      out->z = z->value;
    }
    return z;
  }

  /// zeta, tau: one row per sample. Values are divided by the configured
  /// scales before entering the network.
  Var propagate(LeafCache& p, Var z, const std::vector<double>& zeta,
                const std::vector<double>& tau) {
    require_init();
    int64_t b = z->value.dim(0);
    if (static_cast<int64_t>(zeta.size()) != b || static_cast<int64_t>(tau.size()) != b)
      throw DimensionError("propagate: zeta/tau rows must match batch");
    ++propagator_evals;
    if (prop.kind == PropagatorKind::DCP) {
      Tensor cond = Tensor::zeros({b, 2});
      for (int64_t i = 0; i < b; ++i) {
        cond.data[static_cast<size_t>(2 * i)] = zeta[static_cast<size_t>(i)] / prop.zeta_scale;
        cond.data[static_cast<size_t>(2 * i + 1)] = tau[static_cast<size_t>(i)] / prop.tau_scale;
      }
      Var x = concat_cols({z, p.tape().constant(cond)});
      for (size_t l = 0; l < prop.hidden.size(); ++l) {
        std::string tag = "propagator/fc" + std::to_string(l);
        x = activation(dense(x, p(tag + "/w"), p(tag + "/b")), Act::relu);
      }
      std::string tag = "propagator/fc" + std::to_string(prop.hidden.size());
      return dense(x, p(tag + "/w"), p(tag + "/b"));
    }
    // PEP: F_down(relu(F_up(z)) + PE(zeta) + PE(tau))
    int64_t d = prop.embedding_dim;
    Tensor pe = Tensor::zeros({b, d});
    for (int64_t i = 0; i < b; ++i) {
      auto pz = positional_encoding(
          zeta[static_cast<size_t>(i)] / prop.zeta_scale * prop.pe_input_scale, d);
      auto pt = positional_encoding(
          tau[static_cast<size_t>(i)] / prop.tau_scale * prop.pe_input_scale, d);
      for (int64_t j = 0; j < d; ++j)
        pe.data[static_cast<size_t>(i * d + j)] =
            pz[static_cast<size_t>(j)] + pt[static_cast<size_t>(j)];
    }
    Var up = activation(dense(z, p("propagator/up/w"), p("propagator/up/b")), Act::relu);
    Var mixed = add(up, p.tape().constant(pe));
    return dense(mixed, p("propagator/down/w"), p("propagator/down/b"));
  }

  // -- losses ---------------------------------------------------------------

  struct LossNodes {
    Var total, reconstruction, propagation, kl;
  };

  /// L = L_RE + eta L_PRE + beta L_KL per training step. L_RE and L_PRE are
  /// batch means of the per-sample sum of squared errors over the grid.
  LossNodes loss_total(LeafCache& p, const std::vector<const TupleRecord*>& batch,
                       double beta, double eta, Rng& rng) {
    if (batch.empty()) throw UsageError("loss_total: empty batch");
    if (beta < 0 || eta < 0) throw ConfigError("loss_total: beta, eta must be >= 0");
    int64_t b = static_cast<int64_t>(batch.size());
    Shape bs = {b};
    for (int64_t dd : net.state_shape) bs.push_back(dd);
    Tensor u_now = Tensor::zeros(bs), u_future = Tensor::zeros(bs);
    std::vector<double> zeta(batch.size()), tau(batch.size());
    int64_t n = shape_numel(net.state_shape);
    for (int64_t i = 0; i < b; ++i) {
      const TupleRecord& r = *batch[static_cast<size_t>(i)];
      if (r.u_now.numel() != n || r.u_future.numel() != n)
        throw DimensionError("loss_total: record state size " +
                             std::to_string(r.u_now.numel()) +
                             " does not match model grid " + std::to_string(n));
      std::copy(r.u_now.data.begin(), r.u_now.data.end(), u_now.data.begin() + i * n);
      std::copy(r.u_future.data.begin(), r.u_future.data.end(),
                u_future.data.begin() + i * n);
      zeta[static_cast<size_t>(i)] = r.zeta;
      tau[static_cast<size_t>(i)] = r.tau;
    }
    Tape& tape = p.tape();
    Var u_now_v = tape.constant(u_now);
    auto [mu, log_var] = encode(p, u_now_v);
    Var z = reparameterize(p, mu, log_var, rng);
    Var u_rec = decode(p, z);
    Var l_re = scale(sum_sq_diff(u_rec, u_now_v), 1.0 / static_cast<double>(b));
    Var z_hat = propagate(p, z, zeta, tau);
    Var u_pred = decode(p, z_hat);
    Var l_pre =
        scale(sum_sq_diff(u_pred, tape.constant(u_future)), 1.0 / static_cast<double>(b));
    Var l_kl = kl_divergence(mu, log_var);
    Var total = add(l_re, add(scale(l_pre, eta), scale(l_kl, beta)));
    return {total, l_re, l_pre, l_kl};
  }

  // -- inference ------------------------------------------------------------

  /// Single-shot forecast: decode(propagate(mean-encode(u_now), zeta, tau)).
  /// Uses mu (no sampling); exactly one encoder, propagator and decoder
  /// evaluation regardless of tau.
  Tensor forecast(const Tensor& u_now, double tau, double zeta) {
    require_init();
    // one short-lived tape per phase keeps the working set small; still
    // exactly one encoder, propagator and decoder evaluation
    Tensor mu;
    {
      Tape tape;
      LeafCache p(tape, params, LeafCache::Mode::borrow);
      Shape bs = {1};
      for (int64_t d : net.state_shape) bs.push_back(d);
      auto [mu_v, log_var] = encode(p, tape.constant(Tensor(bs, u_now.data)));
      (void)log_var;
      mu = Tensor({1, net.latent_dim}, mu_v->value.data);
    }
    Tensor z_hat;
    {
      Tape tape;
      LeafCache p(tape, params, LeafCache::Mode::borrow);
      Var out = propagate(p, tape.constant(mu), {zeta}, {tau});
      z_hat = Tensor({1, net.latent_dim}, out->value.data);
    }
    Tape tape;
    LeafCache p(tape, params, LeafCache::Mode::borrow);
    Var out = decode(p, tape.constant(z_hat));
    return Tensor(net.state_shape, out->value.data);
  }

  /// Mean-encode a single state (no sampling), for diagnostics.
  Tensor encode_mean(const Tensor& u) {
    require_init();
    Tape tape;
    LeafCache p(tape, params, LeafCache::Mode::borrow);
    Shape bs = {1};
    for (int64_t d : net.state_shape) bs.push_back(d);
    auto [mu, log_var] = encode(p, tape.constant(Tensor(bs, u.data)));
    (void)log_var;
    return Tensor({net.latent_dim}, mu->value.data);
  }

  Tensor decode_point(const Tensor& z) {
    require_init();
    Tape tape;
    LeafCache p(tape, params, LeafCache::Mode::borrow);
    Var out = decode(p, tape.constant(Tensor({1, net.latent_dim}, z.data)));
    return Tensor(net.state_shape, out->value.data);
  }

  Tensor propagate_point(const Tensor& z, double zeta, double tau) {
    require_init();
    Tape tape;
    LeafCache p(tape, params, LeafCache::Mode::borrow);
    Var out = propagate(p, tape.constant(Tensor({1, net.latent_dim}, z.data)), {zeta},
                        {tau});
    return Tensor({net.latent_dim}, out->value.data);
  }

  // -- checkpointing --------------------------------------------------------

  void save(const std::string& prefix) const {
    params.save(prefix + ".fvps");
    json side = {{"net", net.to_json()}, {"propagator", prop.to_json()}};
    std::ofstream out(prefix + ".json");
    if (!out) throw UsageError("cannot write sidecar: " + prefix + ".json");
    out << side.dump(2) << "\n";
  }

  static Model load(const std::string& prefix) {
    std::ifstream in(prefix + ".json");
    if (!in) throw UsageError("cannot read sidecar: " + prefix + ".json");
    json side = json::parse(in);
    Model m;
    m.net = EncoderDecoderConfig::from_json(side.at("net"));
    m.prop = PropagatorConfig::from_json(side.at("propagator"));
    m.prop.validate(m.net.latent_dim);
    m.params = ParameterStore::load(prefix + ".fvps");
    return m;
  }

  // -- layout helpers -------------------------------------------------------

  int64_t bottom_width() const {
    int64_t w = net.state_shape.back();
    for (size_t i = 0; i < net.channels.size(); ++i) w /= net.stride;
    return w;
  }
  int64_t flattened_size() const {
    int64_t base = bottom_width();
    return net.channels.back() * (net.is_2d() ? base * base : base);
  }

 private:
  void require_init() const {
    if (!initialized())
      throw UsageError("model parameters are not initialized or loaded");
  }
  void check_state_batch(Var u) const {
    Shape want = {u->value.dim(0)};
    for (int64_t d : net.state_shape) want.push_back(d);
    if (u->value.shape != want)
      throw DimensionError("expected state batch " + shape_str(want) + ", got " +
                           shape_str(u->value.shape));
  }

  void glorot(Tensor& t, int64_t fan_in, int64_t fan_out, Rng& rng) {
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& v : t.data) v = rng.uniform(-limit, limit);
  }

  void add_dense(const std::string& tag, int64_t p, int64_t q, Rng& rng) {
    Tensor w = Tensor::zeros({p, q});
    glorot(w, p, q, rng);
    params.add(tag + "/w", std::move(w));
    params.add(tag + "/b", Tensor::zeros({q}));
  }

  void init_params(uint64_t seed) {
    Rng rng(seed);
    int64_t m = net.latent_dim;
    bool two_d = net.is_2d();
    int64_t k = net.kernel;
    // encoder convs
    int64_t cin = 1;
    for (size_t l = 0; l < net.channels.size(); ++l) {
      int64_t cout = net.channels[l];
      Shape ks = two_d ? Shape{cout, cin, k, k} : Shape{cout, cin, k};
      Tensor kernel = Tensor::zeros(ks);
      int64_t taps = two_d ? k * k : k;
      glorot(kernel, cin * taps, cout * taps, rng);
      std::string tag = "encoder/conv" + std::to_string(l);
      params.add(tag + "/kernel", std::move(kernel));
      params.add(tag + "/bias", Tensor::zeros({cout}));
      std::string gn = "encoder/gn" + std::to_string(l);
      params.add(gn + "/gamma", Tensor::full({cout}, 1.0));
      params.add(gn + "/beta", Tensor::zeros({cout}));
      cin = cout;
    }
    // encoder head
    int64_t width = flattened_size();
    for (size_t l = 0; l < net.head_widths.size(); ++l) {
      add_dense("encoder/fc" + std::to_string(l), width, net.head_widths[l], rng);
      width = net.head_widths[l];
    }
    add_dense("encoder/head", width, 2 * m, rng);
    // start with a tight posterior: bias the log-variance half of the head
    // to -4 so early sampling noise does not swamp reconstruction
    Tensor& hb = params.at("encoder/head/b");
    for (int64_t j = m; j < 2 * m; ++j) hb.data[static_cast<size_t>(j)] = -4.0;

    // decoder dense stack mirrors the encoder head
    width = m;
    size_t l = 0;
    for (auto it = net.head_widths.rbegin(); it != net.head_widths.rend(); ++it, ++l) {
      add_dense("decoder/fc" + std::to_string(l), width, *it, rng);
      width = *it;
    }
    add_dense("decoder/fc" + std::to_string(l), width, flattened_size(), rng);
    // decoder convs walk the channel list backwards down to one channel
    std::vector<int64_t> dec_ch(net.channels.rbegin(), net.channels.rend());
    dec_ch.push_back(1);
    for (size_t i = 0; i + 1 < dec_ch.size(); ++i) {
      int64_t ci = dec_ch[i], co = dec_ch[i + 1];
      Shape ks = two_d ? Shape{co, ci, k, k} : Shape{co, ci, k};
      Tensor kernel = Tensor::zeros(ks);
      int64_t taps = two_d ? k * k : k;
      glorot(kernel, ci * taps, co * taps, rng);
      std::string tag = "decoder/conv" + std::to_string(i);
      params.add(tag + "/kernel", std::move(kernel));
      params.add(tag + "/bias", Tensor::zeros({co}));
      if (i + 2 < dec_ch.size()) {
        std::string gn = "decoder/gn" + std::to_string(i);
        params.add(gn + "/gamma", Tensor::full({co}, 1.0));
        params.add(gn + "/beta", Tensor::zeros({co}));
      }
    }

    // propagator
    if (prop.kind == PropagatorKind::DCP) {
      int64_t w = m + 2;  // [z || zeta || tau]
      for (size_t i = 0; i < prop.hidden.size(); ++i) {
        add_dense("propagator/fc" + std::to_string(i), w, prop.hidden[i], rng);
        w = prop.hidden[i];
      }
      add_dense("propagator/fc" + std::to_string(prop.hidden.size()), w, m, rng);
    } else {
      add_dense("propagator/up", m, prop.embedding_dim, rng);
      add_dense("propagator/down", prop.embedding_dim, m, rng);
    }
  }
};

}  // namespace flexi
