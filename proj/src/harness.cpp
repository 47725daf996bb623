#include "difrc/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "difrc/checkpoint.hpp"

namespace difrc {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, end);
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const std::string s(v);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(out)) {
    throw ConfigError("'" + std::string(key) + "' expects a number, got '" + s + "'");
  }
  return out;
}

template <typename T>
T to_int(std::string_view key, std::string_view v) {
  T out = 0;
  const std::string s(v);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("'" + std::string(key) + "' expects an integer, got '" + s + "'");
  }
  return out;
}

template <typename E>
E to_enum(std::string_view key, std::string_view v,
          std::initializer_list<std::pair<std::string_view, E>> names) {
  for (const auto& [n, e] : names) {
    if (n == v) return e;
  }
  std::string allowed;
  for (const auto& [n, e] : names) allowed += (allowed.empty() ? "" : ", ") + std::string(n);
  throw ConfigError("'" + std::string(key) + "' must be one of {" + allowed + "}, got '" + std::string(v) + "'");
}

template <typename E>
std::string from_enum(E v, std::initializer_list<std::pair<std::string_view, E>> names) {
  for (const auto& [n, e] : names) {
    if (e == v) return std::string(n);
  }
  return "?";
}

const std::initializer_list<std::pair<std::string_view, Scenario>> kScenarios = {
    {"nid1", Scenario::kNid1}, {"nid2", Scenario::kNid2}, {"longtail_nid1", Scenario::kLongTailNid1}};
const std::initializer_list<std::pair<std::string_view, TrainingMode>> kModes = {
    {"supervised", TrainingMode::kSupervised},
    {"self_supervised", TrainingMode::kSelfSupervised},
    {"selfsup", TrainingMode::kSelfSupervised}};
const std::initializer_list<std::pair<std::string_view, Ablation>> kAblations = {
    {"full", Ablation::kFull},
    {"tdcl_only", Ablation::kTdclOnly},
    {"ndcr_only", Ablation::kNdcrOnly},
    {"baseline", Ablation::kBaseline}};
const std::initializer_list<std::pair<std::string_view, BaselineMethod>> kMethods = {
    {"fedavg", BaselineMethod::kFedAvg}, {"fedprox", BaselineMethod::kFedProx}};
const std::initializer_list<std::pair<std::string_view, DatasetSource>> kSources = {
    {"synthetic", DatasetSource::kSynthetic}, {"idx", DatasetSource::kIdx}};
const std::initializer_list<std::pair<std::string_view, PcaScope>> kScopes = {
    {"client_round", PcaScope::kClientRound}, {"server", PcaScope::kServer}};

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Field real_field(std::string key, T ExperimentConfig::*m) {
  return {key, [key, m](ExperimentConfig& c, std::string_view v) { c.*m = to_double(key, v); },
          [m](const ExperimentConfig& c) { return fmt(c.*m); }};
}

template <typename T>
Field int_field(std::string key, T ExperimentConfig::*m) {
  return {key,
          [key, m](ExperimentConfig& c, std::string_view v) {
            c.*m = to_int<T>(key, v);
          },
          [m](const ExperimentConfig& c) { return std::to_string(c.*m); }};
}

Field string_field(std::string key, std::string ExperimentConfig::*m) {
  return {key, [m](ExperimentConfig& c, std::string_view v) { c.*m = std::string(v); },
          [m](const ExperimentConfig& c) { return c.*m; }};
}

template <typename E>
Field enum_field(std::string key, E ExperimentConfig::*m,
                 const std::initializer_list<std::pair<std::string_view, E>>& names) {
  return {key, [key, m, &names](ExperimentConfig& c, std::string_view v) { c.*m = to_enum(key, v, names); },
          [m, &names](const ExperimentConfig& c) { return from_enum(c.*m, names); }};
}

const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> f = {
      enum_field("scenario", &C::scenario, kScenarios),
      real_field("alpha", &C::alpha),
      real_field("rho", &C::rho),
      int_field("clients", &C::clients),
      int_field("rounds", &C::rounds),
      int_field("epochs", &C::epochs),
      int_field("batch", &C::batch),
      real_field("lr", &C::lr),
      real_field("momentum", &C::momentum),
      real_field("weight_decay", &C::weight_decay),
      int_field("dim", &C::dim),
      real_field("tau", &C::tau),
      real_field("t_frac", &C::t_frac),
      enum_field("mode", &C::mode, kModes),
      enum_field("ablation", &C::ablation, kAblations),
      enum_field("baseline_method", &C::baseline_method, kMethods),
      real_field("fedprox_mu", &C::fedprox_mu),
      int_field("seed", &C::seed),
      enum_field("dataset", &C::dataset, kSources),
      string_field("idx_images", &C::idx_images),
      string_field("idx_labels", &C::idx_labels),
      string_field("out_dir", &C::out_dir),
      int_field("num_classes", &C::num_classes),
      int_field("image_size", &C::image_size),
      int_field("per_class", &C::per_class),
      int_field("test_per_class", &C::test_per_class),
      real_field("probe_fraction", &C::probe_fraction),
      int_field("diffusion_steps", &C::diffusion_steps),
      real_field("gamma_min", &C::gamma_min),
      real_field("gamma_max", &C::gamma_max),
      int_field("denoiser_steps", &C::denoiser_steps),
      int_field("denoiser_batch", &C::denoiser_batch),
      real_field("denoiser_lr", &C::denoiser_lr),
      string_field("backbone", &C::backbone),
      int_field("neg_pool_size", &C::neg_pool_size),
      real_field("u_decay", &C::u_decay),
      enum_field("pca_scope", &C::pca_scope, kScopes),
      int_field("threads", &C::threads),
  };
  return f;
}

const Field& field(std::string_view key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void set_config_value(ExperimentConfig& config, std::string_view key, std::string_view value) {
  field(key).set(config, trim(value));
}

std::string get_config_value(const ExperimentConfig& config, std::string_view key) {
  return field(key).get(config);
}

void validate_config(const ExperimentConfig& c) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(c.alpha > 0.0, "alpha must be > 0");
  require(c.rho >= 1.0, "rho must be >= 1");
  require(c.clients >= 1, "clients must be >= 1");
  require(c.scenario != Scenario::kNid2 || c.clients == 7, "scenario nid2 requires exactly 7 clients");
  require(c.rounds >= 1, "rounds must be >= 1");
  require(c.epochs >= 0, "epochs must be >= 0");
  require(c.batch >= 1, "batch must be >= 1");
  require(c.lr > 0.0, "lr must be > 0");
  require(c.momentum >= 0.0 && c.momentum < 1.0, "momentum must be in [0, 1)");
  require(c.weight_decay >= 0.0, "weight_decay must be >= 0");
  require(c.dim >= 4 && c.dim % 4 == 0, "dim must be a positive multiple of 4");
  require(c.tau > 0.0, "tau must be > 0");
  require(c.t_frac > 0.0 && c.t_frac <= 1.0, "t_frac must be in (0, 1]");
  require(c.fedprox_mu >= 0.0, "fedprox_mu must be >= 0");
  require(c.dataset != DatasetSource::kIdx || (!c.idx_images.empty() && !c.idx_labels.empty()),
          "dataset idx needs idx_images and idx_labels");
  require(c.num_classes >= 2, "num_classes must be >= 2");
  require(c.image_size >= 8 && c.image_size % 4 == 0, "image_size must be a multiple of 4 and >= 8");
  require(c.per_class >= 1 && c.test_per_class >= 1, "per_class and test_per_class must be >= 1");
  require(c.probe_fraction > 0.0 && c.probe_fraction < 1.0, "probe_fraction must be in (0, 1)");
  require(c.diffusion_steps >= 1, "diffusion_steps must be >= 1");
  require(c.gamma_min > 0.0 && c.gamma_max < 1.0 && c.gamma_min <= c.gamma_max,
          "need 0 < gamma_min <= gamma_max < 1");
  require(c.denoiser_steps >= 0 && c.denoiser_batch >= 1 && c.denoiser_lr > 0.0,
          "denoiser_steps >= 0, denoiser_batch >= 1 and denoiser_lr > 0 required");
  require(c.neg_pool_size >= 1 && c.neg_pool_size <= c.num_classes, "neg_pool_size must be in [1, num_classes]");
  require(c.u_decay >= 0.0 && c.u_decay < 1.0, "u_decay must be in [0, 1)");
  require(c.threads >= 1, "threads must be >= 1");
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig c;
  bool clients_set = false;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(body).substr(0, eq));
    set_config_value(c, key, std::string_view(body).substr(eq + 1));
    if (key == "clients") clients_set = true;
  }
  if (c.scenario == Scenario::kNid2) {
    if (clients_set && c.clients != 7) {
      throw ConfigError("scenario nid2 uses 6 biased + 1 unbiased clients; clients = " +
                        std::to_string(c.clients) + " is not allowed");
    }
    c.clients = 7;
  }
  validate_config(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

ExperimentData prepare_data(const ExperimentConfig& c) {
  validate_config(c);
  LabeledImages all;
  if (c.dataset == DatasetSource::kSynthetic) {
    all = generate_synthetic_dataset(c.num_classes, c.per_class + c.test_per_class, c.image_size,
                                     derive_seed(c.seed, 0xda7a));
  } else {
    all = load_idx(c.idx_images, c.idx_labels);
    if (all.num_classes != c.num_classes) {
      throw ConfigError("IDX data has " + std::to_string(all.num_classes) + " classes, config says " +
                        std::to_string(c.num_classes));
    }
    if (all.images.front().height != c.image_size || all.images.front().width != c.image_size) {
      throw ConfigError("IDX images are not " + std::to_string(c.image_size) + "x" + std::to_string(c.image_size));
    }
  }
  ExperimentData d;
  LabeledImages rest;
  std::tie(d.test, rest) = split_balanced(all, c.test_per_class, derive_seed(c.seed, 0x7e57));
  const auto hist = rest.histogram();
  const int smallest = *std::min_element(hist.begin(), hist.end());
  const int probe_n = std::max(1, static_cast<int>(std::lround(c.probe_fraction * smallest)));
  std::tie(d.probe, d.pool) = split_balanced(rest, probe_n, derive_seed(c.seed, 0x960e));
  if (c.scenario == Scenario::kLongTailNid1) d.pool = make_long_tail(d.pool, c.rho, derive_seed(c.seed, 0x7a11));
  const std::uint64_t pseed = derive_seed(c.seed, 0x9a27);
  d.clients = c.scenario == Scenario::kNid2 ? partition_extreme(d.pool, pseed)
                                            : partition_dirichlet(d.pool, c.clients, c.alpha, pseed);
  return d;
}

Backbone pretrain_backbone(const ExperimentConfig& c, const LabeledImages& probe,
                           std::vector<double>* loss_trace) {
  DenoiserArch arch;
  arch.image_size = c.image_size;
  arch.cond_width = c.dim;
  ScheduleConfig sc;
  sc.steps = c.diffusion_steps;
  sc.gamma_min = c.gamma_min;
  sc.gamma_max = c.gamma_max;
  Rng rng = make_rng(c.seed, 0xbb);
  Backbone bb{DenoiserNet(arch, derive_seed(c.seed, 0xbb, 1)), PromptTable(c.num_classes, c.dim, rng), sc,
              sc.build()};
  DenoiserTrainOptions opts;
  opts.steps = c.denoiser_steps;
  opts.batch = c.denoiser_batch;
  opts.lr = c.denoiser_lr;
  auto trace = train_denoiser(bb.net, bb.table, probe, bb.schedule, opts, rng);
  if (loss_trace != nullptr) *loss_trace = std::move(trace);
  return bb;
}

TrainingSetup make_training_setup(const ExperimentConfig& c, const ExperimentData& data) {
  TrainingSetup s;
  s.arch.image_size = c.image_size;
  s.arch.dim = c.dim;
  s.arch.num_classes = c.num_classes;
  s.local.epochs = c.epochs;
  s.local.batch = c.batch;
  s.local.lr = c.lr;
  s.local.momentum = c.momentum;
  s.local.weight_decay = c.weight_decay;
  s.local.ablation = c.ablation;
  s.local.mode = c.mode;
  s.local.method = c.baseline_method;
  s.local.fedprox_mu = c.fedprox_mu;
  s.local.tau = c.tau;
  s.local.t_frac = c.t_frac;
  s.local.neg_pool_size = c.neg_pool_size;
  s.local.u_decay = c.u_decay;
  s.local.pca_scope = c.pca_scope;
  s.rounds = c.rounds;
  s.seed = c.seed;
  s.threads = c.threads;
  s.clients = &data.clients;
  s.test = &data.test;
  s.probe = &data.probe;
  s.frozen.target_dims = default_target_dims(c.dim);
  return s;
}

std::string format_metrics_rows(const RoundReport& r) {
  std::string out;
  char buf[256];
  auto row = [&](int client, const LossBreakdown& l, const std::string& acc) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.8g,%.8g,%.8g,%.8g,", r.round, client, l.tdcl, l.ndcr, l.ce,
                  l.total);
    out += buf;
    out += acc;
    out += '\n';
  };
  for (std::size_t k = 0; k < r.client_losses.size(); ++k) row(static_cast<int>(k), r.client_losses[k], "");
  std::snprintf(buf, sizeof(buf), "%.8g", r.accuracy);
  row(-1, r.global_loss(), buf);
  return out;
}

void emit_plot_data(std::span<const RoundReport> history, const std::filesystem::path& out_dir) {
  if (history.empty()) throw DataError("no rounds to plot");
  auto write = [&](const std::string& name, auto value) {
    std::ofstream out(out_dir / name);
    if (!out) throw Error("cannot write '" + (out_dir / name).string() + "'");
    out << "round,value\n";
    char buf[64];
    for (const auto& r : history) {
      std::snprintf(buf, sizeof(buf), "%.17g", value(r));
      out << r.round << ',' << buf << '\n';
    }
  };
  write("accuracy.csv", [](const RoundReport& r) { return r.accuracy; });
  write("loss.csv", [](const RoundReport& r) { return r.global_loss().total; });
}

void write_summary(const std::filesystem::path& path, const ExperimentResult& res) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  LossBreakdown mean;
  const auto& reps = res.training.reports;
  for (const auto& r : reps) {
    const LossBreakdown g = r.global_loss();
    mean.tdcl += g.tdcl;
    mean.ndcr += g.ndcr;
    mean.ce += g.ce;
    mean.total += g.total;
  }
  const double n = reps.empty() ? 1.0 : static_cast<double>(reps.size());
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "final_acc=%.6f\nbest_acc=%.6f\nbest_round=%d\nmean_tdcl=%.6f\nmean_ndcr=%.6f\n"
                "mean_ce=%.6f\nmean_total=%.6f\n",
                res.final_accuracy, res.best_accuracy, res.best_round, mean.tdcl / n, mean.ndcr / n,
                mean.ce / n, mean.total / n);
  out << buf;
}

ExperimentResult execute_experiment(const ExperimentConfig& c, const Backbone* shared, bool write_outputs) {
  validate_config(c);
  const std::filesystem::path out_dir(c.out_dir);
  if (write_outputs) std::filesystem::create_directories(out_dir);
  const ExperimentData data = prepare_data(c);

  const bool needs_backbone = c.ablation != Ablation::kBaseline;
  std::unique_ptr<Backbone> own;
  const Backbone* bb = shared;
  if (needs_backbone && bb == nullptr) {
    if (!c.backbone.empty()) {
      own = std::make_unique<Backbone>(load_backbone(c.backbone));
    } else {
      own = std::make_unique<Backbone>(pretrain_backbone(c, data.probe));
      if (write_outputs) save_backbone(out_dir / "backbone.ckpt", *own);
    }
    bb = own.get();
  }
  if (bb != nullptr && (bb->table.num_classes() != c.num_classes || bb->net.arch().cond_width != c.dim)) {
    throw ConfigError("backbone does not match num_classes / dim of the config");
  }

  TrainingSetup setup = make_training_setup(c, data);
  setup.frozen.backbone = bb;
  PcaBasis server_basis;
  if (needs_backbone && c.pca_scope == PcaScope::kServer) {
    server_basis = fit_server_basis(*bb, data.probe, setup.frozen.target_dims, c.t_frac,
                                    derive_seed(c.seed, 0xba5e));
    setup.frozen.server_basis = &server_basis;
  }

  std::ofstream metrics;
  if (write_outputs) {
    metrics.open(out_dir / "metrics.csv");
    if (!metrics) throw Error("cannot write metrics.csv in '" + out_dir.string() + "'");
    metrics << kMetricsHeader << '\n';
    setup.on_round = [&metrics](const RoundReport& r) { metrics << format_metrics_rows(r) << std::flush; };
  }

  ExperimentResult res;
  res.training = run_training(setup);
  const auto& reps = res.training.reports;
  res.final_accuracy = reps.back().accuracy;
  res.best_accuracy = reps.front().accuracy;
  res.best_round = reps.front().round;
  for (const auto& r : reps) {
    if (r.accuracy > res.best_accuracy) {
      res.best_accuracy = r.accuracy;
      res.best_round = r.round;
    }
  }
  if (write_outputs) {
    metrics.close();
    write_summary(out_dir / "summary.txt", res);
    emit_plot_data(reps, out_dir);
    save_model(out_dir / "model.ckpt", FlModel(setup.arch), res.training.final_params);
    std::ofstream(out_dir / "config.txt") << serialize_config(c);
  }
  return res;
}

int run_experiment(const ExperimentConfig& config, std::ostream& log) {
  try {
    const ExperimentResult r = execute_experiment(config);
    log << "final_acc=" << r.final_accuracy << " best_acc=" << r.best_accuracy << " best_round=" << r.best_round
        << '\n';
    return 0;
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace difrc
