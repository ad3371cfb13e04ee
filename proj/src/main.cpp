#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "flexi/bench.hpp"
#include "flexi/diagnostics.hpp"
#include "flexi/training.hpp"

namespace fs = std::filesystem;
using namespace flexi;

namespace {

// ---------------------------------------------------------------------------
// logging (FLEXI_LOG = error | info | debug)

enum class LogLevel { error = 0, info = 1, debug = 2 };
LogLevel g_log = LogLevel::error;

void init_log_level() {
  const char* env = std::getenv("FLEXI_LOG");
  if (!env) return;
  std::string v = env;
  if (v == "error")
    g_log = LogLevel::error;
  else if (v == "info")
    g_log = LogLevel::info;
  else if (v == "debug")
    g_log = LogLevel::debug;
  else
    throw ConfigError("FLEXI_LOG must be one of error, info, debug (got '" + v +
                      "')");
}

void log_info(const std::string& msg) {
  if (g_log >= LogLevel::info) std::cerr << "[info] " << msg << "\n";
}
void log_debug(const std::string& msg) {
  if (g_log >= LogLevel::debug) std::cerr << "[debug] " << msg << "\n";
}

// ---------------------------------------------------------------------------
// shared option state and small helpers

struct Globals {
  uint64_t seed = 0;
  int64_t threads = 1;
  std::string out_dir = ".";

  std::string out_path(const std::string& p) const {
    fs::path fp(p);
    if (fp.is_absolute()) return p;
    return (fs::path(out_dir) / fp).string();
  }
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("invalid JSON in " + path + ": " + e.what());
  }
}

const json& require_field(const json& j, const std::string& name) {
  if (!j.contains(name)) throw ConfigError("missing config field: " + name);
  return j.at(name);
}

void write_text(const std::string& path, const std::string& text) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write: " + path);
  out << text;
  if (!out) throw UsageError("write failed: " + path);
}

/// FNV-1a 64-bit over the file's bytes, as a hex string.
std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot hash missing file: " + path);
  uint64_t h = 1469598103934665603ull;
  char buf[65536];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

// dataset generation shared by `gen` and `pipeline`
struct GenResult {
  json config;
  std::vector<TupleRecord> records;
};

GenResult generate(const std::string& pde, int64_t K, int64_t J, int64_t I,
                   uint64_t seed, const json& overrides) {
  if (K < 1 || J < 1 || I < 1)
    throw ConfigError("gen: k, j, i must all be >= 1");
  GenResult out;
  if (pde == "burgers") {
    BurgersConfig cfg = BurgersConfig::from_json(overrides);
    out.records = build_dataset(cfg, K, J, I, seed);
    out.config = cfg.to_json();
  } else if (pde == "advdiff") {
    AdvDiffConfig cfg = AdvDiffConfig::from_json(overrides);
    out.records = build_dataset(cfg, K, J, I, seed);
    out.config = cfg.to_json();
  } else {
    throw ConfigError("gen: pde must be burgers or advdiff, got '" + pde + "'");
  }
  out.config["k"] = K;
  out.config["j"] = J;
  out.config["i"] = I;
  out.config["seed"] = seed;
  return out;
}

Model model_from_configs(const json& dataset_config, const json& train_json,
                         const TrainingConfig& tc, uint64_t seed) {
  EncoderDecoderConfig net;
  if (train_json.contains("net")) {
    net = EncoderDecoderConfig::from_json(train_json.at("net"));
  } else if (dataset_config.value("pde", "") == "advdiff") {
    net = EncoderDecoderConfig::advdiff_default(
        dataset_config.value("nx", int64_t{32}));
  } else {
    net = EncoderDecoderConfig::burgers_default();
    net.state_shape = {dataset_config.value("n", int64_t{128})};
  }
  PropagatorConfig prop;
  if (train_json.contains("propagator_config"))
    prop = PropagatorConfig::from_json(train_json.at("propagator_config"));
  prop.kind = tc.propagator;
  net.validate();
  prop.validate(net.latent_dim);
  return Model(net, prop, seed);
}

TrainingConfig training_from_json(const json& j, uint64_t seed) {
  TrainingConfig tc =
      j.contains("training") ? TrainingConfig::from_json(j.at("training"))
                             : TrainingConfig::from_json(j);
  tc.seed = seed;
  return tc;
}

json zones_json(const ZoneMse& z) {
  json out;
  if (z.interp) out["interp"] = *z.interp;
  if (z.left_extrap) out["left_extrap"] = *z.left_extrap;
  if (z.right_extrap) out["right_extrap"] = *z.right_extrap;
  return out;
}

std::string field_csv(const Tensor& u) {
  std::ostringstream out;
  out << "index,value\n";
  for (size_t i = 0; i < u.data.size(); ++i) out << i << "," << u.data[i] << "\n";
  return out.str();
}

json jacobian_json(const JacobianReport& r) {
  return {{"z", r.z.data},
          {"singular_values", r.singular_values},
          {"frobenius", r.frobenius},
          {"logdet_pullback", std::isfinite(r.logdet_pullback)
                                  ? json(r.logdet_pullback)
                                  : json("-inf")}};
}

// ---------------------------------------------------------------------------
// stage implementations (shared between subcommands and `pipeline`)

std::string stage_gen(const Globals& g, const std::string& pde, int64_t K,
                      int64_t J, int64_t I, const json& overrides,
                      const std::string& out_file) {
  GenResult r = generate(pde, K, J, I, g.seed, overrides);
  std::string path = g.out_path(out_file);
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  save_dataset(path, r.config, r.records);
  log_info("gen: wrote " + std::to_string(r.records.size()) + " records to " +
           path);
  return path;
}

struct SplitPaths {
  std::string train, val_interp, val_left, val_right;
};

SplitPaths stage_split(const Globals& g, const std::string& data_file,
                       double train_frac) {
  DatasetFile df = load_dataset(data_file);
  DatasetSplit split = split_dataset(df.records, train_frac, g.seed);
  json cfg = df.config;
  cfg["train_frac"] = train_frac;
  SplitPaths paths{g.out_path("split_train.fvds"), g.out_path("split_val_interp.fvds"),
                   g.out_path("split_val_left.fvds"),
                   g.out_path("split_val_right.fvds")};
  save_dataset(paths.train, cfg, split.train);
  save_dataset(paths.val_interp, cfg, split.val_interp);
  save_dataset(paths.val_left, cfg, split.val_left_extrap);
  save_dataset(paths.val_right, cfg, split.val_right_extrap);
  json counts = {{"train", split.train.size()},
                 {"val_interp", split.val_interp.size()},
                 {"val_left_extrap", split.val_left_extrap.size()},
                 {"val_right_extrap", split.val_right_extrap.size()}};
  std::cout << counts.dump() << "\n";
  return paths;
}

std::string stage_train(const Globals& g, const std::string& data_file,
                        const json& config, const std::string& ckpt_name) {
  DatasetFile df = load_dataset(data_file);
  double train_frac = config.value("train_frac", 0.7);
  DatasetSplit split = split_dataset(df.records, train_frac, g.seed);
  TrainingConfig tc = training_from_json(config, g.seed);
  Model model = model_from_configs(df.config, config, tc, g.seed);
  log_info("train: " + std::to_string(split.train.size()) + " records, " +
           std::to_string(tc.epochs) + " epochs, " +
           std::to_string(model.params.total_parameters()) + " parameters");
  TrainReport report = train(model, split, tc, [&](int64_t e, const TrainReport& r) {
    log_info("epoch " + std::to_string(e) + " loss " +
             std::to_string(r.loss.back()));
  });
  report.final_mse =
      evaluate_zones(model, split, config.value("eval_samples", int64_t{200}),
                     g.seed);
  std::string prefix = g.out_path(ckpt_name);
  model.save(prefix);
  write_text(prefix + "_report.csv", report.to_csv());
  write_text(prefix + "_report.json", report.to_json().dump(2) + "\n");
  std::cout << json{{"checkpoint", prefix},
                    {"final_loss", report.loss.back()},
                    {"final_mse", zones_json(report.final_mse)}}
                   .dump()
            << "\n";
  return prefix;
}

std::string stage_evaluate(const Globals& g, const std::string& model_prefix,
                           const std::string& data_file, double train_frac,
                           int64_t samples) {
  Model model = Model::load(model_prefix);
  DatasetFile df = load_dataset(data_file);
  DatasetSplit split = split_dataset(df.records, train_frac, g.seed);
  ZoneMse mse = evaluate_zones(model, split, samples, g.seed);
  json out = {{"samples", samples}, {"mse", zones_json(mse)}};
  std::string path = g.out_path("eval.json");
  write_text(path, out.dump(2) + "\n");
  std::cout << out.dump() << "\n";
  return path;
}

std::string stage_diagnose(const Globals& g, const std::string& model_prefix,
                           const std::string& data_file, int64_t record_idx,
                           const std::string& out_file) {
  Model model = Model::load(model_prefix);
  DatasetFile df = load_dataset(data_file);
  if (record_idx < 0 || record_idx >= static_cast<int64_t>(df.records.size()))
    throw ConfigError("diagnose: record index out of range (dataset has " +
                      std::to_string(df.records.size()) + " records)");
  const TupleRecord& rec = df.records[static_cast<size_t>(record_idx)];
  EncodedVsPropagated cmp = compare_encoded_vs_propagated(model, rec);
  json report = {{"record", record_idx},
                 {"encoded", jacobian_json(cmp.encoded)},
                 {"propagated", jacobian_json(cmp.propagated)},
                 {"mse_encoded", cmp.mse_encoded},
                 {"mse_propagated", cmp.mse_propagated}};

  // intrinsic dimension over encoded current states
  int64_t n_latents =
      std::min<int64_t>(256, static_cast<int64_t>(df.records.size()));
  if (n_latents > 12) {
    Tensor pts = Tensor::zeros({n_latents, model.net.latent_dim});
    for (int64_t i = 0; i < n_latents; ++i) {
      Tensor z = model.encode_mean(df.records[static_cast<size_t>(i)].u_now);
      std::copy(z.data.begin(), z.data.end(),
                pts.data.begin() + i * model.net.latent_dim);
    }
    IntrinsicDimEstimate id = intrinsic_dimension_mle(pts, 10);
    report["intrinsic_dimension"] = {{"k", id.k}, {"estimate", id.estimate}};
  }

  // latent structure map for 1-d fields
  if (model.net.state_shape.size() == 1 && model.net.latent_dim >= 2) {
    double dx = 1.0 / static_cast<double>(model.net.state_shape[0] - 1);
    LatentGridSpec spec;
    spec.n1 = spec.n2 = 12;
    LatentMap map = latent_grid_map(model, spec, dx);
    std::ostringstream csv;
    csv << "z1,z2,sharpness,peak_position\n";
    for (size_t i = 0; i < map.points.size(); ++i)
      csv << map.points[i].data[0] << "," << map.points[i].data[1] << ","
          << map.sharpness[i] << "," << map.peak_position[i] << "\n";
    write_text(g.out_path("latent_map.csv"), csv.str());
    report["latent_map_csv"] = "latent_map.csv";  // relative: keeps reports
                                                  // byte-identical across runs
  }

  std::string path = g.out_path(out_file);
  write_text(path, report.dump(2) + "\n");
  std::cout << report.dump() << "\n";
  return path;
}

}  // namespace

// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
  CLI::App app{"Single-shot parametric PDE forecasting toolkit"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags are accepted after the subcommand too

  Globals g;
  app.add_option("--seed", g.seed, "Base RNG seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker thread budget")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "Directory for output artifacts")
      ->capture_default_str();

  // ---- gen ----
  auto* gen = app.add_subcommand("gen", "Generate an analytical dataset");
  std::string gen_pde, gen_out = "dataset.fvds", gen_config;
  int64_t gen_k = 4, gen_j = 4, gen_i = 3;
  gen->add_option("--pde", gen_pde, "burgers or advdiff")->required();
  gen->add_option("--k", gen_k, "Parameter samples")->capture_default_str();
  gen->add_option("--j", gen_j, "Initial times per parameter")->capture_default_str();
  gen->add_option("--i", gen_i, "Offsets per initial time")->capture_default_str();
  gen->add_option("--out", gen_out, "Output dataset file")->capture_default_str();
  gen->add_option("--config", gen_config, "JSON file with generator overrides");
  gen->callback([&] {
    json overrides = gen_config.empty() ? json::object() : read_json_file(gen_config);
    overrides["pde"] = gen_pde;
    stage_gen(g, gen_pde, gen_k, gen_j, gen_i, overrides, gen_out);
  });

  // ---- split ----
  auto* split_cmd = app.add_subcommand("split", "Partition a dataset into zones");
  std::string split_data;
  double split_frac = 0.7;
  split_cmd->add_option("--data", split_data, "Dataset file")->required();
  split_cmd->add_option("--train-frac", split_frac, "Training fraction")
      ->capture_default_str();
  split_cmd->callback([&] { stage_split(g, split_data, split_frac); });

  // ---- train ----
  auto* train_cmd = app.add_subcommand("train", "Train a forecasting model");
  std::string train_data, train_config, train_ckpt = "model";
  train_cmd->add_option("--data", train_data, "Dataset file")->required();
  train_cmd->add_option("--config", train_config, "Training config JSON");
  train_cmd->add_option("--ckpt", train_ckpt, "Checkpoint name")
      ->capture_default_str();
  train_cmd->callback([&] {
    json cfg = train_config.empty() ? json::object() : read_json_file(train_config);
    stage_train(g, train_data, cfg, train_ckpt);
  });

  // ---- evaluate ----
  auto* eval_cmd = app.add_subcommand("evaluate", "Zone-wise forecast MSE");
  std::string eval_model, eval_data;
  double eval_frac = 0.7;
  int64_t eval_samples = 200;
  eval_cmd->add_option("--model", eval_model, "Checkpoint prefix")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset file")->required();
  eval_cmd->add_option("--train-frac", eval_frac, "Training fraction")
      ->capture_default_str();
  eval_cmd->add_option("--samples", eval_samples, "Max records per zone")
      ->capture_default_str();
  eval_cmd->callback(
      [&] { stage_evaluate(g, eval_model, eval_data, eval_frac, eval_samples); });

  // ---- diagnose ----
  auto* diag_cmd = app.add_subcommand("diagnose", "Latent-geometry diagnostics");
  std::string diag_model, diag_data, diag_out = "report.json";
  int64_t diag_record = 0;
  diag_cmd->add_option("--model", diag_model, "Checkpoint prefix")->required();
  diag_cmd->add_option("--data", diag_data, "Dataset file")->required();
  diag_cmd->add_option("--record", diag_record, "Record index")
      ->capture_default_str();
  diag_cmd->add_option("--out", diag_out, "Report file")->capture_default_str();
  diag_cmd->callback(
      [&] { stage_diagnose(g, diag_model, diag_data, diag_record, diag_out); });

  // ---- baseline-train ----
  auto* btrain = app.add_subcommand("baseline-train",
                                    "Train the rolling autoencoder baseline");
  std::string bt_config, bt_ckpt = "baseline";
  int64_t bt_n = 128, bt_re_count = 6, bt_seq_len = 60;
  double bt_re_lo = 600.0, bt_re_hi = 2225.0, bt_t0 = 0.5;
  bool bt_full = false;
  btrain->add_option("--n", bt_n, "Spatial grid points")->capture_default_str();
  btrain->add_option("--re-count", bt_re_count, "Training Re values")
      ->capture_default_str();
  btrain->add_option("--re-lo", bt_re_lo, "Lowest training Re")
      ->capture_default_str();
  btrain->add_option("--re-hi", bt_re_hi, "Highest training Re")
      ->capture_default_str();
  btrain->add_option("--seq-len", bt_seq_len, "Snapshots per trajectory")
      ->capture_default_str();
  btrain->add_option("--t0", bt_t0, "Trajectory start time")->capture_default_str();
  btrain->add_flag("--full", bt_full, "Use full-length training schedules");
  btrain->add_option("--config", bt_config, "Baseline config JSON");
  btrain->add_option("--ckpt", bt_ckpt, "Checkpoint name")->capture_default_str();
  btrain->callback([&] {
    AELSTMConfig cfg = bt_full ? AELSTMConfig::full() : AELSTMConfig::desk();
    if (!bt_config.empty()) cfg = AELSTMConfig::from_json(read_json_file(bt_config));
    cfg.state_dim = bt_n;
    cfg.validate();
    if (bt_re_count < 1) throw ConfigError("baseline-train: re-count must be >= 1");
    if (bt_seq_len < 2) throw ConfigError("baseline-train: seq-len must be >= 2");
    BurgersConfig pde;
    pde.n = bt_n;
    AELSTM model(cfg, g.seed);
    std::vector<Tensor> snaps;
    std::vector<double> res;
    std::vector<std::vector<Tensor>> trajs;
    for (int64_t r = 0; r < bt_re_count; ++r) {
      double re = bt_re_count == 1
                      ? bt_re_lo
                      : bt_re_lo + (bt_re_hi - bt_re_lo) * static_cast<double>(r) /
                                       static_cast<double>(bt_re_count - 1);
      res.push_back(re);
      std::vector<Tensor> traj;
      for (int64_t t = 0; t < bt_seq_len; ++t)
        traj.push_back(snapshot(pde, bt_t0 + static_cast<double>(t) * pde.dt, re));
      snaps.insert(snaps.end(), traj.begin(), traj.end());
      trajs.push_back(std::move(traj));
    }
    log_info("baseline-train: autoencoder over " + std::to_string(snaps.size()) +
             " snapshots");
    std::vector<double> ae_loss = model.ae_train(snaps, g.seed);
    std::vector<Tensor> seqs;
    for (const auto& traj : trajs) {
      Tensor seq = Tensor::zeros({bt_seq_len, cfg.latent_dim});
      for (int64_t t = 0; t < bt_seq_len; ++t) {
        Tensor z = model.encode_point(traj[static_cast<size_t>(t)]);
        std::copy(z.data.begin(), z.data.end(),
                  seq.data.begin() + t * cfg.latent_dim);
      }
      seqs.push_back(std::move(seq));
    }
    log_info("baseline-train: latent stepper over " + std::to_string(seqs.size()) +
             " sequences");
    std::vector<double> lstm_loss = model.lstm_train(seqs, res, g.seed);
    std::string prefix = g.out_path(bt_ckpt);
    model.save(prefix);
    std::ostringstream csv;
    csv << "epoch,ae_loss\n";
    for (size_t e = 0; e < ae_loss.size(); ++e) csv << (e + 1) << "," << ae_loss[e] << "\n";
    write_text(prefix + "_ae_loss.csv", csv.str());
    std::ostringstream csv2;
    csv2 << "epoch,lstm_loss\n";
    for (size_t e = 0; e < lstm_loss.size(); ++e)
      csv2 << (e + 1) << "," << lstm_loss[e] << "\n";
    write_text(prefix + "_lstm_loss.csv", csv2.str());
    std::cout << json{{"checkpoint", prefix},
                      {"ae_final_loss", ae_loss.back()},
                      {"lstm_final_loss", lstm_loss.back()}}
                     .dump()
              << "\n";
  });

  // ---- baseline-forecast ----
  auto* bfc = app.add_subcommand("baseline-forecast", "Rolling baseline forecast");
  std::string bf_model, bf_window, bf_out = "baseline_pred.csv";
  int64_t bf_steps = 0;
  double bf_re = -1.0;
  bfc->add_option("--model", bf_model, "Baseline checkpoint prefix")->required();
  bfc->add_option("--window", bf_window, "Dataset file supplying the input window")
      ->required();
  bfc->add_option("--steps", bf_steps, "Rollout steps")->required();
  bfc->add_option("--re", bf_re, "Reynolds number (default: first record)");
  bfc->add_option("--out", bf_out, "Prediction CSV")->capture_default_str();
  bfc->callback([&] {
    AELSTM model = AELSTM::load(bf_model);
    DatasetFile df = load_dataset(bf_window);
    if (static_cast<int64_t>(df.records.size()) < model.cfg.window)
      throw ConfigError("baseline-forecast: window file has " +
                        std::to_string(df.records.size()) + " records, need " +
                        std::to_string(model.cfg.window));
    Tensor window = Tensor::zeros({model.cfg.window, model.cfg.state_dim});
    for (int64_t t = 0; t < model.cfg.window; ++t) {
      const Tensor& u = df.records[static_cast<size_t>(t)].u_now;
      if (u.numel() != model.cfg.state_dim)
        throw ConfigError("baseline-forecast: snapshot length mismatch");
      std::copy(u.data.begin(), u.data.end(),
                window.data.begin() + t * model.cfg.state_dim);
    }
    double re = bf_re > 0 ? bf_re : df.records[0].zeta;
    Tensor pred = model.rollout_forecast(window, re, bf_steps);
    write_text(g.out_path(bf_out), field_csv(pred));
    std::cout << json{{"out", g.out_path(bf_out)}, {"re", re}, {"steps", bf_steps}}
                     .dump()
              << "\n";
  });

  // ---- forecast ----
  auto* fc = app.add_subcommand("forecast", "Single-shot forecast");
  std::string fc_model, fc_in, fc_out = "pred.csv";
  int64_t fc_tau_steps = 0, fc_record = 0;
  double fc_re = -1.0;
  fc->add_option("--model", fc_model, "Checkpoint prefix")->required();
  fc->add_option("--in", fc_in, "Dataset file supplying the input state")
      ->required();
  fc->add_option("--tau-steps", fc_tau_steps, "Forecast horizon in solver steps")
      ->required();
  fc->add_option("--record", fc_record, "Record index")->capture_default_str();
  fc->add_option("--re", fc_re, "Reynolds number (default: record value)");
  fc->add_option("--out", fc_out, "Prediction CSV")->capture_default_str();
  fc->callback([&] {
    if (fc_tau_steps < 1) throw ConfigError("forecast: tau-steps must be >= 1");
    Model model = Model::load(fc_model);
    DatasetFile df = load_dataset(fc_in);
    if (fc_record < 0 || fc_record >= static_cast<int64_t>(df.records.size()))
      throw ConfigError("forecast: record index out of range");
    const TupleRecord& rec = df.records[static_cast<size_t>(fc_record)];
    double dt = df.config.value("dt", 0.004);
    double re = fc_re > 0 ? fc_re : rec.zeta;
    Tensor pred =
        model.forecast(rec.u_now, static_cast<double>(fc_tau_steps) * dt, re);
    write_text(g.out_path(fc_out), field_csv(pred));
    std::cout << json{{"out", g.out_path(fc_out)},
                      {"re", re},
                      {"tau", static_cast<double>(fc_tau_steps) * dt}}
                     .dump()
              << "\n";
  });

  // ---- bench ----
  auto* bench = app.add_subcommand("bench", "Latency benchmark");
  std::string bench_model, bench_baseline, bench_data;
  std::vector<int64_t> bench_taus = {150, 300, 450};
  int64_t bench_trials = 300;
  double bench_re = -1.0;
  bench->add_option("--model", bench_model, "Checkpoint prefix")->required();
  bench->add_option("--baseline", bench_baseline, "Baseline checkpoint prefix")
      ->required();
  bench->add_option("--data", bench_data, "Dataset file supplying inputs")
      ->required();
  bench->add_option("--tau-steps", bench_taus, "Horizons in solver steps")
      ->capture_default_str();
  bench->add_option("--trials", bench_trials, "Timed trials per horizon")
      ->capture_default_str();
  bench->add_option("--re", bench_re, "Reynolds number (default: first record)");
  bench->callback([&] {
    if (bench_trials < 30)
      throw ConfigError("bench: need at least 30 trials, got " +
                        std::to_string(bench_trials));
    Model model = Model::load(bench_model);
    AELSTM baseline = AELSTM::load(bench_baseline);
    DatasetFile df = load_dataset(bench_data);
    if (static_cast<int64_t>(df.records.size()) < baseline.cfg.window)
      throw ConfigError("bench: dataset smaller than the baseline window");
    Tensor window = Tensor::zeros({baseline.cfg.window, baseline.cfg.state_dim});
    for (int64_t t = 0; t < baseline.cfg.window; ++t)
      std::copy(df.records[static_cast<size_t>(t)].u_now.data.begin(),
                df.records[static_cast<size_t>(t)].u_now.data.end(),
                window.data.begin() + t * baseline.cfg.state_dim);
    double re = bench_re > 0 ? bench_re : df.records[0].zeta;
    double dt = df.config.value("dt", 0.004);
    log_debug("bench: timing " + std::to_string(bench_taus.size()) + " horizons");
    BenchResult r = run_bench(model, baseline, df.records[0].u_now, window, re,
                              dt, bench_taus, bench_trials);
    write_text(g.out_path("bench.csv"), r.to_csv());
    write_text(g.out_path("bench.json"), r.to_json().dump(2) + "\n");
    std::cout << r.to_json().dump() << "\n";
  });

  // ---- pipeline ----
  auto* pipe = app.add_subcommand("pipeline", "gen -> split -> train -> evaluate -> diagnose");
  std::string pipe_config;
  pipe->add_option("--config", pipe_config, "Pipeline config JSON")->required();
  pipe->callback([&] {
    json cfg = read_json_file(pipe_config);
    std::string pde = require_field(cfg, "pde").get<std::string>();
    int64_t K = cfg.value("k", int64_t{4});
    int64_t J = cfg.value("j", int64_t{4});
    int64_t I = cfg.value("i", int64_t{3});
    double train_frac = cfg.value("train_frac", 0.7);
    json manifest = {{"seed", g.seed}, {"stages", json::array()}};
    std::string manifest_path = g.out_path("manifest.json");
    auto record_stage = [&](const std::string& name, const std::string& path) {
      manifest["stages"].push_back(
          {{"name", name}, {"path", path}, {"hash", file_hash(path)}});
      write_text(manifest_path, manifest.dump(2) + "\n");
    };
    try {
      json overrides = cfg.value("generator", json::object());
      overrides["pde"] = pde;
      std::string data = stage_gen(g, pde, K, J, I, overrides, "dataset.fvds");
      record_stage("gen", data);
      SplitPaths sp = stage_split(g, data, train_frac);
      record_stage("split", sp.train);
      json tc = cfg.value("train", json::object());
      tc["train_frac"] = train_frac;
      std::string ckpt = stage_train(g, data, tc, "model");
      record_stage("train", ckpt + ".fvps");
      std::string eval_path = stage_evaluate(g, ckpt, data, train_frac,
                                             cfg.value("eval_samples", int64_t{200}));
      record_stage("evaluate", eval_path);
      std::string report = stage_diagnose(g, ckpt, data, 0, "report.json");
      record_stage("diagnose", report);
    } catch (...) {
      write_text(manifest_path, manifest.dump(2) + "\n");  // partial manifest
      throw;
    }
    std::cout << json{{"manifest", manifest_path}}.dump() << "\n";
  });

  // ---- scaling ----
  auto* scal = app.add_subcommand("scaling", "MSE vs dataset-size study");
  std::string scal_pde = "burgers", scal_config;
  std::vector<int64_t> scal_sizes = {2, 4, 8};  // parameter samples K per run
  int64_t scal_j = 4, scal_i = 3;
  scal->add_option("--pde", scal_pde, "burgers or advdiff")->capture_default_str();
  scal->add_option("--sizes", scal_sizes, "Ascending K values")
      ->capture_default_str();
  scal->add_option("--j", scal_j, "Initial times per parameter")
      ->capture_default_str();
  scal->add_option("--i", scal_i, "Offsets per initial time")->capture_default_str();
  scal->add_option("--config", scal_config, "Training config JSON");
  scal->callback([&] {
    json tc_json = scal_config.empty() ? json::object() : read_json_file(scal_config);
    ScalingResult r = data_scaling_study(scal_sizes, [&](int64_t K) {
      json overrides = tc_json.value("generator", json::object());
      overrides["pde"] = scal_pde;
      GenResult gen_r = generate(scal_pde, K, scal_j, scal_i, g.seed, overrides);
      DatasetSplit split =
          split_dataset(gen_r.records, tc_json.value("train_frac", 0.7), g.seed);
      TrainingConfig tc = training_from_json(tc_json, g.seed);
      Model model = model_from_configs(gen_r.config, tc_json, tc, g.seed);
      train(model, split, tc);
      ZoneMse mse = evaluate_zones(model, split, 200, g.seed);
      double v = mse.interp.value_or(0.0);
      log_info("scaling: K=" + std::to_string(K) + " mse=" + std::to_string(v));
      return v;
    });
    std::ostringstream csv;
    csv << "size,mse\n";
    for (auto& [size, mse] : r.points) csv << size << "," << mse << "\n";
    write_text(g.out_path("scaling.csv"), csv.str());
    json out = {{"slope", r.slope}, {"points", json::array()}};
    for (auto& [size, mse] : r.points)
      out["points"].push_back({{"size", size}, {"mse", mse}});
    write_text(g.out_path("scaling.json"), out.dump(2) + "\n");
    std::cout << out.dump() << "\n";
  });

  try {
    init_log_level();
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
