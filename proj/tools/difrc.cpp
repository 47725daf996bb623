// difrc: run federated experiments, evaluate the convergence bound and
// probe representation dumps.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "difrc/analysis.hpp"
#include "difrc/checkpoint.hpp"
#include "difrc/harness.hpp"

namespace {

using namespace difrc;

std::vector<int> read_labels_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read labels '" + path + "'");
  std::vector<int> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto comma = line.rfind(',');
    const std::string field = comma == std::string::npos ? line : line.substr(comma + 1);
    try {
      labels.push_back(std::stoi(field));
    } catch (const std::exception&) {
      if (labels.empty()) continue;  // header
      throw DataError("bad label line '" + line + "'");
    }
  }
  return labels;
}

int cmd_probe(const std::string& reps, const std::string& labels_path, int k, double train_fraction,
              std::uint64_t seed, const std::string& clusters_out) {
  const RepresentationDump dump = read_representation_dump(reps);
  std::vector<int> labels = labels_path.empty() ? dump.ids : read_labels_csv(labels_path);
  if (labels.size() != dump.ids.size()) {
    throw DataError("labels file has " + std::to_string(labels.size()) + " entries, dump has " +
                    std::to_string(dump.ids.size()));
  }
  const auto n = labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, 0x5e1);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train >= n) throw ConfigError("train fraction leaves an empty split");
  Eigen::MatrixXd tr(dump.dim, static_cast<Eigen::Index>(n_train)), te(dump.dim, static_cast<Eigen::Index>(n - n_train));
  std::vector<int> ytr, yte;
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = static_cast<Eigen::Index>(order[i]);
    if (i < n_train) {
      tr.col(static_cast<Eigen::Index>(i)) = dump.vectors.col(src);
      ytr.push_back(labels[order[i]]);
    } else {
      te.col(static_cast<Eigen::Index>(i - n_train)) = dump.vectors.col(src);
      yte.push_back(labels[order[i]]);
    }
  }
  ProbeOptions opts;
  opts.seed = seed;
  const double acc = linear_probe(tr, ytr, te, yte, opts);
  if (k <= 0) k = *std::max_element(labels.begin(), labels.end()) + 1;
  const ClusterResult cl = kmeans(dump.vectors, k, 100, seed);
  const double purity = cluster_purity(cl.assignments, labels);
  std::printf("probe_acc=%.6f\nkmeans_k=%d\npurity=%.6f\ninertia=%.6f\n", acc, k, purity, cl.inertia);
  if (!clusters_out.empty()) write_cluster_csv(clusters_out, cl.assignments, labels);
  return 0;
}

int cmd_extract(const ExperimentConfig& config, const std::string& backbone_path, const std::string& kind,
                const std::string& out) {
  const Backbone bb = load_backbone(backbone_path);
  const ExperimentData data = prepare_data(config);
  const auto dims = default_target_dims(config.dim);
  const PcaBasis basis = fit_server_basis(bb, data.probe, dims, config.t_frac, derive_seed(config.seed, 0xba5e));
  const LabeledImages& set = data.test;
  std::vector<const ImageTensor*> ptrs;
  for (const auto& img : set.images) ptrs.push_back(&img);
  Eigen::MatrixXd vectors(basis.dim(), static_cast<Eigen::Index>(set.size()));
  constexpr std::size_t kChunk = 128;
  Rng rng = make_rng(config.seed, 0xe7);
  const bool conditional = kind == "conditional";
  if (!conditional && kind != "denoising") throw ConfigError("kind must be conditional or denoising");
  const int t = denoising_step(config.t_frac, bb.schedule.steps());
  for (std::size_t b = 0; b < set.size(); b += kChunk) {
    const std::size_t len = std::min(kChunk, set.size() - b);
    std::span<const ImageTensor* const> imgs(ptrs.data() + b, len);
    std::span<const int> ids(set.labels.data() + b, len);
    const auto taps =
        conditional
            ? conditional_taps(bb.net, imgs, Mat::Zero(bb.net.arch().cond_width, static_cast<Eigen::Index>(len)), ids, bb.table)
            : denoising_taps(bb.net, imgs, ids, t, bb.schedule, bb.table, rng);
    vectors.middleCols(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(len)) = fuse(taps, basis);
  }
  write_representation_dump(out, conditional ? RepresentationKind::kConditional : RepresentationKind::kDenoising,
                            set.labels, vectors);
  std::printf("wrote %zu representations (d=%d) to %s\n", set.size(), basis.dim(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning with frozen diffusion representations"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "Run one federated experiment");
  std::string config_path;
  run->add_option("--config", config_path, "key = value config file");
  std::map<std::string, std::string> overrides;
  for (const auto& key : config_keys()) {
    run->add_option("--" + key, overrides[key], "override '" + key + "'");
  }
  std::string out_alias;
  run->add_option("--out", out_alias, "alias for --out_dir");

  // bound
  auto* bound = app.add_subcommand("bound", "Minimum rounds and maximum learning rate for convergence");
  BoundInputs bin;
  bound->add_option("--l0", bin.L0, "initial loss")->required();
  bound->add_option("--lstar", bin.Lstar, "optimal loss")->required();
  bound->add_option("--l1", bin.L1, "smoothness constant L1")->required();
  bound->add_option("--l2", bin.L2, "constant L2")->required();
  bound->add_option("--b", bin.B, "constant B")->required();
  bound->add_option("--sigma2", bin.sigma2, "gradient variance bound")->required();
  bound->add_option("--classes", bin.C, "class count")->required();
  bound->add_option("--epochs", bin.E, "local epochs")->required();
  bound->add_option("--eta", bin.eta, "learning rate")->required();
  bound->add_option("--xi", bin.xi, "target xi")->required();

  // probe
  auto* probe = app.add_subcommand("probe", "Linear probe and k-means purity on a representation dump");
  std::string reps, labels, clusters_out;
  int k = 0;
  double train_fraction = 0.8;
  std::uint64_t probe_seed = 0;
  probe->add_option("--reps", reps, "representation dump")->required();
  probe->add_option("--labels", labels, "CSV with one label per record (default: dump ids)");
  probe->add_option("--k", k, "k-means cluster count (default: class count)");
  probe->add_option("--train-fraction", train_fraction, "probe train split");
  probe->add_option("--seed", probe_seed, "seed");
  probe->add_option("--clusters", clusters_out, "write point,cluster,label CSV");

  // extract
  auto* extract = app.add_subcommand("extract", "Dump fused representations of the test split");
  std::string ex_config, ex_backbone, ex_kind = "denoising", ex_out;
  extract->add_option("--config", ex_config, "experiment config (dataset settings)");
  extract->add_option("--backbone", ex_backbone, "backbone checkpoint")->required();
  extract->add_option("--kind", ex_kind, "conditional or denoising");
  extract->add_option("--out", ex_out, "output dump")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*run) {
      ExperimentConfig cfg;
      if (!config_path.empty()) cfg = load_config(config_path);
      for (const auto& key : config_keys()) {
        if (run->count("--" + key) > 0) set_config_value(cfg, key, overrides[key]);
      }
      if (run->count("--out") > 0) cfg.out_dir = out_alias;
      if (cfg.scenario == Scenario::kNid2 && run->count("--clients") == 0) cfg.clients = 7;
      validate_config(cfg);
      return run_experiment(cfg, std::cout);
    }
    if (*bound) {
      const BoundResult r = convergence_bound(bin);
      std::printf("omega1=%.17g\nomega2=%.17g\ndenominator=%.17g\n", r.omega1, r.omega2, r.denominator);
      if (r.feasible()) {
        std::printf("r_min=%.17g\n", *r.r_min);
      } else {
        std::printf("r_min=infeasible\n");
      }
      std::printf("eta_max=%.17g\n", r.eta_max);
      return 0;
    }
    if (*probe) return cmd_probe(reps, labels, k, train_fraction, probe_seed, clusters_out);
    if (*extract) {
      ExperimentConfig cfg;
      if (!ex_config.empty()) cfg = load_config(ex_config);
      return cmd_extract(cfg, ex_backbone, ex_kind, ex_out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
