#pragma once

#include <fstream>

#include "flexi/model.hpp"
#include "flexi/training.hpp"

namespace flexi {

// ---------------------------------------------------------------------------
// configuration

struct AELSTMConfig {
  int64_t state_dim = 128;
  std::vector<int64_t> encoder_widths{512, 256, 128, 64, 32};  // decoder mirrors
  int64_t latent_dim = 2;
  int64_t lstm_hidden = 40;
  int64_t lstm_layers = 2;
  int64_t window = 40;
  double re_scale = 2400.0;  // normalizes the Re input feature

  int64_t ae_epochs = 500;
  double ae_alpha = 3e-4;
  int64_t ae_batch = 32;
  int64_t lstm_epochs = 2000;
  double lstm_alpha = 5e-5;

  int64_t lstm_input_dim() const { return latent_dim + 1; }  // latents + Re

  void validate() const {
    if (state_dim < 1) throw ConfigError("baseline: state_dim must be >= 1");
    if (encoder_widths.empty())
      throw ConfigError("baseline: encoder_widths must be non-empty");
    for (int64_t w : encoder_widths)
      if (w < 1) throw ConfigError("baseline: encoder widths must be >= 1");
    if (latent_dim < 1) throw ConfigError("baseline: latent_dim must be >= 1");
    if (lstm_hidden < 1 || lstm_layers < 1)
      throw ConfigError("baseline: lstm_hidden and lstm_layers must be >= 1");
    if (window < 1) throw ConfigError("baseline: window must be >= 1");
    if (ae_epochs < 1 || lstm_epochs < 1 || ae_batch < 1)
      throw ConfigError("baseline: epochs and batch must be >= 1");
    if (ae_alpha <= 0 || lstm_alpha <= 0)
      throw ConfigError("baseline: learning rates must be > 0");
    if (re_scale <= 0) throw ConfigError("baseline: re_scale must be > 0");
  }

  json to_json() const {
    return {{"state_dim", state_dim},     {"encoder_widths", encoder_widths},
            {"latent_dim", latent_dim},   {"lstm_hidden", lstm_hidden},
            {"lstm_layers", lstm_layers}, {"window", window},
            {"re_scale", re_scale},       {"ae_epochs", ae_epochs},
            {"ae_alpha", ae_alpha},       {"ae_batch", ae_batch},
            {"lstm_epochs", lstm_epochs}, {"lstm_alpha", lstm_alpha}};
  }
  static AELSTMConfig from_json(const json& j) {
    AELSTMConfig c;
    c.state_dim = j.value("state_dim", c.state_dim);
    c.encoder_widths = j.value("encoder_widths", c.encoder_widths);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.lstm_hidden = j.value("lstm_hidden", c.lstm_hidden);
    c.lstm_layers = j.value("lstm_layers", c.lstm_layers);
    c.window = j.value("window", c.window);
    c.re_scale = j.value("re_scale", c.re_scale);
    c.ae_epochs = j.value("ae_epochs", c.ae_epochs);
    c.ae_alpha = j.value("ae_alpha", c.ae_alpha);
    c.ae_batch = j.value("ae_batch", c.ae_batch);
    c.lstm_epochs = j.value("lstm_epochs", c.lstm_epochs);
    c.lstm_alpha = j.value("lstm_alpha", c.lstm_alpha);
    c.validate();
    return c;
  }

  static AELSTMConfig full() { return AELSTMConfig{}; }
  /// Same architecture and rates, shortened schedules.
  static AELSTMConfig desk() {
    AELSTMConfig c;
    c.ae_epochs = 100;
    c.lstm_epochs = 300;
    return c;
  }
};

/// Reynolds grids used for the accuracy comparison: a regular training grid
/// plus test values below, inside, and above it.
struct ComparisonReGrid {
  std::vector<double> train, test;
  static ComparisonReGrid standard() {
    ComparisonReGrid g;
    for (double re = 600.0; re <= 2225.0 + 1e-9; re += 25.0) g.train.push_back(re);
    g.test = {550.0, 1412.5, 2450.0};
    return g;
  }
};

// ---------------------------------------------------------------------------
// model

class AELSTM {
 public:
  AELSTMConfig cfg;
  ParameterStore params;
  mutable size_t encoder_evals = 0, decoder_evals = 0, lstm_evals = 0;

  AELSTM() = default;
  AELSTM(AELSTMConfig c, uint64_t seed) : cfg(std::move(c)) {
    cfg.validate();
    init_params(seed);
  }

  bool initialized() const { return params.size() > 0; }

  // -- min-max normalization per spatial point ------------------------------

  void fit_normalizer(const std::vector<Tensor>& snapshots) {
    if (snapshots.empty()) throw ConfigError("baseline: no snapshots to normalize");
    Tensor& lo = params.at("norm/lo");
    Tensor& scale = params.at("norm/scale");
    std::vector<double> hi(static_cast<size_t>(cfg.state_dim),
                           -std::numeric_limits<double>::infinity());
    std::fill(lo.data.begin(), lo.data.end(),
              std::numeric_limits<double>::infinity());
    for (const Tensor& u : snapshots) {
      if (u.numel() != cfg.state_dim)
        throw DimensionError("baseline: snapshot length mismatch");
      for (size_t i = 0; i < u.data.size(); ++i) {
        lo.data[i] = std::min(lo.data[i], u.data[i]);
        hi[i] = std::max(hi[i], u.data[i]);
      }
    }
    for (size_t i = 0; i < scale.data.size(); ++i) {
      double s = hi[i] - lo.data[i];
      scale.data[i] = s > 0.0 ? s : 1.0;  // constant point: identity scale
    }
  }

  Tensor normalize(const Tensor& u) const {
    const Tensor& lo = params.at("norm/lo");
    const Tensor& scale = params.at("norm/scale");
    Tensor out = u;
    for (size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = (out.data[i] - lo.data[i]) / scale.data[i];
    return out;
  }
  Tensor denormalize(const Tensor& un) const {
    const Tensor& lo = params.at("norm/lo");
    const Tensor& scale = params.at("norm/scale");
    Tensor out = un;
    for (size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = out.data[i] * scale.data[i] + lo.data[i];
    return out;
  }

  // -- graph builders (normalized space) ------------------------------------

  Var encode(LeafCache& p, Var xn) {
    ++encoder_evals;
    Var x = xn;
    for (size_t l = 0; l < cfg.encoder_widths.size(); ++l) {
      std::string tag = "ae/enc" + std::to_string(l);
      x = activation(dense(x, p(tag + "/w"), p(tag + "/b")), Act::relu);
    }
    return dense(x, p("ae/enc_head/w"), p("ae/enc_head/b"));
  }

  Var decode(LeafCache& p, Var z) {
    ++decoder_evals;
    Var x = z;
    for (size_t l = cfg.encoder_widths.size(); l-- > 0;) {
      std::string tag = "ae/dec" + std::to_string(l);
      x = activation(dense(x, p(tag + "/w"), p(tag + "/b")), Act::relu);
    }
    return dense(x, p("ae/dec_head/w"), p("ae/dec_head/b"));
  }

  /// One LSTM iteration over the stacked layers; h and c hold one [b, q]
  /// node per layer and are advanced in place. Returns the predicted next
  /// latent [b, m].
  Var lstm_step(LeafCache& p, Var x, std::vector<Var>& h, std::vector<Var>& c) {
    ++lstm_evals;
    Var in = x;
    for (int64_t l = 0; l < cfg.lstm_layers; ++l) {
      std::string tag = "lstm/l" + std::to_string(l);
      Var hc = lstm_cell(in, h[static_cast<size_t>(l)], c[static_cast<size_t>(l)],
                         p(tag + "/w_ih"), p(tag + "/w_hh"), p(tag + "/b_ih"),
                         p(tag + "/b_hh"));
      h[static_cast<size_t>(l)] = lstm_h(hc);
      c[static_cast<size_t>(l)] = lstm_c(hc);
      in = h[static_cast<size_t>(l)];
    }
    return dense(in, p("lstm/head/w"), p("lstm/head/b"));
  }

  std::vector<Var> zero_state(Tape& tape) const {
    std::vector<Var> s;
    for (int64_t l = 0; l < cfg.lstm_layers; ++l)
      s.push_back(tape.constant(Tensor::zeros({1, cfg.lstm_hidden})));
    return s;
  }

  // -- autoencoder training -------------------------------------------------

  /// Fits the normalizer, then minimizes reconstruction MSE with Adam.
  /// Returns per-epoch mean batch losses.
  std::vector<double> ae_train(const std::vector<Tensor>& snapshots, uint64_t seed) {
    require_init();
    fit_normalizer(snapshots);
    std::vector<Tensor> norm;
    norm.reserve(snapshots.size());
    for (const Tensor& u : snapshots) norm.push_back(normalize(u));

    Rng shuffle_rng = Rng::derive(seed, 1);
    AdamState adam;
    std::vector<size_t> order(norm.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> losses;
    for (int64_t epoch = 0; epoch < cfg.ae_epochs; ++epoch) {
      for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(
                                    0, static_cast<int64_t>(i) - 1))]);
      double sum = 0.0;
      int64_t steps = 0;
      for (size_t start = 0; start < order.size();
           start += static_cast<size_t>(cfg.ae_batch)) {
        size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.ae_batch));
        int64_t b = static_cast<int64_t>(stop - start);
        Tensor batch = Tensor::zeros({b, cfg.state_dim});
        for (size_t i = start; i < stop; ++i)
          std::copy(norm[order[i]].data.begin(), norm[order[i]].data.end(),
                    batch.data.begin() +
                        static_cast<int64_t>(i - start) * cfg.state_dim);
        Tape tape;
        LeafCache p(tape, params);
        Var x = tape.constant(batch);
        Var loss = scale(sum_sq_diff(decode(p, encode(p, x)), x),
                         1.0 / static_cast<double>(b * cfg.state_dim));
        params.zero_grads();
        tape.backward(loss);
        adam_step(params, adam, cfg.ae_alpha);
        sum += loss->value.data[0];
        ++steps;
      }
      losses.push_back(sum / static_cast<double>(steps));
    }
    return losses;
  }

  Tensor encode_point(const Tensor& u) {
    require_init();
    Tape tape;
    LeafCache p(tape, params);
    Var z = encode(p, tape.constant(Tensor({1, cfg.state_dim}, normalize(u).data)));
    return Tensor({cfg.latent_dim}, z->value.data);
  }
  Tensor decode_point(const Tensor& z) {
    require_init();
    Tape tape;
    LeafCache p(tape, params);
    Var x = decode(p, tape.constant(Tensor({1, cfg.latent_dim}, z.data)));
    return denormalize(Tensor({cfg.state_dim}, x->value.data));
  }

  // -- LSTM training --------------------------------------------------------

  /// Next-step latent prediction over full sequences (teacher forcing).
  /// Each sequence is [T, m] with its Re value; one Adam step per sequence.
  /// Returns per-epoch mean losses.
  std::vector<double> lstm_train(const std::vector<Tensor>& latent_seqs,
                                 const std::vector<double>& res, uint64_t seed) {
    require_init();
    if (latent_seqs.empty() || latent_seqs.size() != res.size())
      throw ConfigError("baseline: need matching latent sequences and Re values");
    for (const Tensor& s : latent_seqs)
      if (s.rank() != 2 || s.dim(0) < 2 || s.dim(1) != cfg.latent_dim)
        throw DimensionError("baseline: latent sequence must be [T>=2, latent_dim]");

    Rng shuffle_rng = Rng::derive(seed, 3);
    AdamState adam;
    std::vector<size_t> order(latent_seqs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> losses;
    for (int64_t epoch = 0; epoch < cfg.lstm_epochs; ++epoch) {
      for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(
                                    0, static_cast<int64_t>(i) - 1))]);
      double sum = 0.0;
      for (size_t s : order) {
        const Tensor& seq = latent_seqs[s];
        int64_t T = seq.dim(0);
        Tape tape;
        LeafCache p(tape, params);
        std::vector<Var> h = zero_state(tape), c = zero_state(tape);
        Var loss = nullptr;
        for (int64_t t = 0; t + 1 < T; ++t) {
          Var x = tape.constant(step_input(row(seq, t), res[s]));
          Var pred = lstm_step(p, x, h, c);
          Var err = sum_sq_diff(pred, tape.constant(Tensor(
                                          {1, cfg.latent_dim}, row(seq, t + 1).data)));
          loss = loss ? add(loss, err) : err;
        }
        loss = scale(loss, 1.0 / static_cast<double>((T - 1) * cfg.latent_dim));
        params.zero_grads();
        tape.backward(loss);
        adam_step(params, adam, cfg.lstm_alpha);
        sum += loss->value.data[0];
      }
      losses.push_back(sum / static_cast<double>(order.size()));
    }
    return losses;
  }

  // -- rolling forecast -----------------------------------------------------

  struct State {
    std::vector<Tensor> h, c;  // [1, q] per layer
    Tensor z;                  // last latent [m]
  };

  /// Encodes the input window and runs the LSTM across it, producing the
  /// recurrent state that seeds the free-running phase.
  State prime_window(const Tensor& u_window, double re, int64_t* ops = nullptr) {
    require_init();
    if (u_window.rank() != 2 || u_window.dim(0) != cfg.window ||
        u_window.dim(1) != cfg.state_dim)
      throw DimensionError("baseline: window must be [" + std::to_string(cfg.window) +
                           ", " + std::to_string(cfg.state_dim) + "]");
    Tape tape;
    LeafCache p(tape, params);
    std::vector<Var> h = zero_state(tape), c = zero_state(tape);
    Var z = nullptr;
    for (int64_t t = 0; t < cfg.window; ++t) {
      Tensor u = Tensor({cfg.state_dim},
                        std::vector<double>(
                            u_window.data.begin() + t * cfg.state_dim,
                            u_window.data.begin() + (t + 1) * cfg.state_dim));
      Var zt = encode(p, tape.constant(Tensor({1, cfg.state_dim}, normalize(u).data)));
      z = zt;
      Var x = concat_cols({zt, tape.constant(re_feature(re))});
      lstm_step(p, x, h, c);
    }
    State st;
    for (int64_t l = 0; l < cfg.lstm_layers; ++l) {
      st.h.push_back(h[static_cast<size_t>(l)]->value);
      st.c.push_back(c[static_cast<size_t>(l)]->value);
    }
    st.z = Tensor({cfg.latent_dim}, z->value.data);
    if (ops) *ops = static_cast<int64_t>(tape.ops_recorded());
    return st;
  }

  /// One free-running iteration: feeds the state's own latent back and
  /// advances h, c and z in place. Returns the predicted latent [m].
  Tensor step_latent(State& st, double re) {
    require_init();
    Tape tape;
    LeafCache p(tape, params);
    std::vector<Var> h, c;
    for (int64_t l = 0; l < cfg.lstm_layers; ++l) {
      h.push_back(tape.constant(Tensor({1, cfg.lstm_hidden}, st.h[static_cast<size_t>(l)].data)));
      c.push_back(tape.constant(Tensor({1, cfg.lstm_hidden}, st.c[static_cast<size_t>(l)].data)));
    }
    Var x = tape.constant(step_input(st.z, re));
    Var pred = lstm_step(p, x, h, c);
    for (int64_t l = 0; l < cfg.lstm_layers; ++l) {
      st.h[static_cast<size_t>(l)] = h[static_cast<size_t>(l)]->value;
      st.c[static_cast<size_t>(l)] = c[static_cast<size_t>(l)]->value;
    }
    st.z = Tensor({cfg.latent_dim}, pred->value.data);
    return st.z;
  }

  /// Free-running rollout from a primed state: `steps` LSTM iterations
  /// feeding each prediction back, then one decode. This is the part whose
  /// cost grows with the horizon; `ops` reports the primitives it recorded.
  Tensor rollout_from_state(State st, double re, int64_t steps,
                            int64_t* ops = nullptr) {
    require_init();
    if (steps < 1) throw UsageError("baseline: rollout steps must be >= 1");
    Tape tape;
    LeafCache p(tape, params);
    std::vector<Var> h, c;
    for (int64_t l = 0; l < cfg.lstm_layers; ++l) {
      h.push_back(tape.constant(Tensor({1, cfg.lstm_hidden}, st.h[static_cast<size_t>(l)].data)));
      c.push_back(tape.constant(Tensor({1, cfg.lstm_hidden}, st.c[static_cast<size_t>(l)].data)));
    }
    Var re_const = tape.constant(re_feature(re));
    Var z = tape.constant(Tensor({1, cfg.latent_dim}, st.z.data));
    for (int64_t s = 0; s < steps; ++s)
      z = lstm_step(p, concat_cols({z, re_const}), h, c);
    Var out = decode(p, z);
    if (ops) *ops = static_cast<int64_t>(tape.ops_recorded());
    return denormalize(Tensor({cfg.state_dim}, out->value.data));
  }

  /// Full rolling forecast: window priming plus free-running rollout.
  /// `rollout_ops` reports only the free-running phase.
  Tensor rollout_forecast(const Tensor& u_window, double re, int64_t steps,
                          int64_t* rollout_ops = nullptr) {
    State st = prime_window(u_window, re);
    return rollout_from_state(std::move(st), re, steps, rollout_ops);
  }

  // -- checkpointing --------------------------------------------------------

  void save(const std::string& prefix) const {
    params.save(prefix + ".fvps");
    std::ofstream out(prefix + ".json");
    if (!out) throw UsageError("cannot write sidecar: " + prefix + ".json");
    out << json{{"baseline", cfg.to_json()}}.dump(2) << "\n";
  }
  static AELSTM load(const std::string& prefix) {
    std::ifstream in(prefix + ".json");
    if (!in) throw UsageError("cannot read sidecar: " + prefix + ".json");
    AELSTM m;
    m.cfg = AELSTMConfig::from_json(json::parse(in).at("baseline"));
    m.params = ParameterStore::load(prefix + ".fvps");
    return m;
  }

 private:
  void require_init() const {
    if (!initialized())
      throw UsageError("baseline parameters are not initialized or loaded");
  }

  static Tensor row(const Tensor& seq, int64_t t) {
    int64_t m = seq.dim(1);
    return Tensor({m}, std::vector<double>(seq.data.begin() + t * m,
                                           seq.data.begin() + (t + 1) * m));
  }

  Tensor re_feature(double re) const {
    return Tensor({1, 1}, {re / cfg.re_scale});
  }

  Tensor step_input(const Tensor& z, double re) const {
    std::vector<double> v(z.data);
    v.push_back(re / cfg.re_scale);
    return Tensor({1, cfg.lstm_input_dim()}, std::move(v));
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
    // encoder stack and mirrored decoder
    int64_t in = cfg.state_dim;
    for (size_t l = 0; l < cfg.encoder_widths.size(); ++l) {
      add_dense("ae/enc" + std::to_string(l), in, cfg.encoder_widths[l], rng);
      in = cfg.encoder_widths[l];
    }
    add_dense("ae/enc_head", in, cfg.latent_dim, rng);
    int64_t out = cfg.latent_dim;
    for (size_t l = cfg.encoder_widths.size(); l-- > 0;) {
      add_dense("ae/dec" + std::to_string(l), out, cfg.encoder_widths[l], rng);
      out = cfg.encoder_widths[l];
    }
    add_dense("ae/dec_head", out, cfg.state_dim, rng);
    // stacked LSTM
    for (int64_t l = 0; l < cfg.lstm_layers; ++l) {
      std::string tag = "lstm/l" + std::to_string(l);
      int64_t p = l == 0 ? cfg.lstm_input_dim() : cfg.lstm_hidden;
      int64_t q = cfg.lstm_hidden;
      Tensor wih = Tensor::zeros({4 * q, p});
      Tensor whh = Tensor::zeros({4 * q, q});
      glorot(wih, p, 4 * q, rng);
      glorot(whh, q, 4 * q, rng);
      params.add(tag + "/w_ih", std::move(wih));
      params.add(tag + "/w_hh", std::move(whh));
      params.add(tag + "/b_ih", Tensor::zeros({4 * q}));
      params.add(tag + "/b_hh", Tensor::zeros({4 * q}));
    }
    add_dense("lstm/head", cfg.lstm_hidden, cfg.latent_dim, rng);
    // identity normalization until fitted
    params.add("norm/lo", Tensor::zeros({cfg.state_dim}));
    params.add("norm/scale", Tensor::full({cfg.state_dim}, 1.0));
  }
};

}  // namespace flexi
