#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "difrc/fed.hpp"

namespace difrc {

enum class Scenario { kNid1, kNid2, kLongTailNid1 };
enum class DatasetSource { kSynthetic, kIdx };

struct ExperimentConfig {
  Scenario scenario = Scenario::kNid1;
  double alpha = 0.2;
  double rho = 10.0;
  int clients = 10;
  int rounds = 30;
  int epochs = 2;
  int batch = 32;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  int dim = 64;
  double tau = 0.06;
  double t_frac = 0.15;
  TrainingMode mode = TrainingMode::kSupervised;
  Ablation ablation = Ablation::kFull;
  BaselineMethod baseline_method = BaselineMethod::kFedAvg;
  double fedprox_mu = 0.01;
  std::uint64_t seed = 0;
  DatasetSource dataset = DatasetSource::kSynthetic;
  std::string idx_images;
  std::string idx_labels;
  std::string out_dir = "out";

  // Dataset sizes (synthetic) and held-out splits.
  int num_classes = 10;
  int image_size = 16;
  int per_class = 100;
  int test_per_class = 50;
  double probe_fraction = 0.2;

  // Backbone pre-training.
  int diffusion_steps = 100;
  double gamma_min = 1e-3;
  double gamma_max = 0.2;
  int denoiser_steps = 1500;
  int denoiser_batch = 32;
  double denoiser_lr = 0.02;
  std::string backbone;  // checkpoint to load instead of pre-training

  int neg_pool_size = 8;
  double u_decay = 0.9;
  PcaScope pca_scope = PcaScope::kClientRound;
  int threads = 1;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Every config key, in serialization order.
const std::vector<std::string>& config_keys();

/// Sets one key from its text value; throws ConfigError on unknown keys or
/// bad values.
void set_config_value(ExperimentConfig& config, std::string_view key, std::string_view value);
std::string get_config_value(const ExperimentConfig& config, std::string_view key);

/// Checks ranges and scenario gating (nid2 requires exactly 7 clients).
void validate_config(const ExperimentConfig& config);

/// Parses `key = value` lines; `#` starts a comment. A nid2 scenario sets
/// K = 7 unless the text sets another client count, which is rejected.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& config);

/// Class-balanced server probe split, client pool and test set.
struct ExperimentData {
  LabeledImages probe;
  LabeledImages pool;  // after scenario transforms (long tail)
  LabeledImages test;
  std::vector<ClientDataset> clients;
};

ExperimentData prepare_data(const ExperimentConfig& config);

/// Pre-trains the denoiser and prompt table on the probe split.
Backbone pretrain_backbone(const ExperimentConfig& config, const LabeledImages& probe,
                           std::vector<double>* loss_trace = nullptr);

TrainingSetup make_training_setup(const ExperimentConfig& config, const ExperimentData& data);

struct ExperimentResult {
  TrainingResult training;
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  int best_round = 0;
};

/// Full pipeline: data, backbone (pre-trained unless `shared` or
/// config.backbone is given), federated training, and output files in
/// config.out_dir when `write_outputs` is set.
ExperimentResult execute_experiment(const ExperimentConfig& config, const Backbone* shared = nullptr,
                                    bool write_outputs = true);

/// Runs execute_experiment and maps failures to exit codes:
/// 0 success, 1 configuration error, 2 runtime failure.
int run_experiment(const ExperimentConfig& config, std::ostream& log);

/// metrics.csv header.
inline constexpr std::string_view kMetricsHeader = "round,client,tdcl,ndcr,ce,total,accuracy";

/// One client row per client and one global row (client -1) per round.
std::string format_metrics_rows(const RoundReport& report);

/// accuracy.csv and loss.csv with header `round,value`.
void emit_plot_data(std::span<const RoundReport> history, const std::filesystem::path& out_dir);

void write_summary(const std::filesystem::path& path, const ExperimentResult& result);

}  // namespace difrc
