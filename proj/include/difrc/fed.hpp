#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "difrc/data.hpp"
#include "difrc/denoiser.hpp"
#include "difrc/model.hpp"
#include "difrc/objective.hpp"
#include "difrc/representation.hpp"

namespace difrc {

/// One client's private shard.
struct ClientDataset {
  LabeledImages data;
  std::vector<std::size_t> source_indices;  // positions in the partitioned dataset

  std::size_t n() const { return data.size(); }
  std::vector<int> histogram() const { return data.histogram(); }
};

/// Per class, Dirichlet(alpha) client proportions with largest-remainder
/// rounding. Empty clients receive one sample from the largest client.
std::vector<ClientDataset> partition_dirichlet(const LabeledImages& data, int clients, double alpha,
                                               std::uint64_t seed);

/// Six single-class clients on six distinct random classes plus one client
/// holding the remaining samples of every class. Each single-class client
/// takes `biased_share` of its class.
std::vector<ClientDataset> partition_extreme(const LabeledImages& data, std::uint64_t seed,
                                             double biased_share = 0.5);

/// Exponential long-tail profile: class j keeps round(n_max * rho^(-j/(C-1))).
LabeledImages make_long_tail(const LabeledImages& data, double rho, std::uint64_t seed);

enum class BaselineMethod { kFedAvg, kFedProx };
enum class PcaScope { kClientRound, kServer };

struct LocalConfig {
  int epochs = 2;
  int batch = 32;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  Ablation ablation = Ablation::kFull;
  TrainingMode mode = TrainingMode::kSupervised;
  BaselineMethod method = BaselineMethod::kFedAvg;
  double fedprox_mu = 0.01;
  double tau = 0.06;
  double t_frac = 0.15;
  int neg_pool_size = 8;
  bool pool_includes_base = false;
  LossWeights weights;
  /// Decay of the per-prompt running average of the normalization factor.
  double u_decay = 0.9;
  PcaScope pca_scope = PcaScope::kClientRound;
  /// Images per denoiser call during extraction.
  int extraction_chunk = 64;
};

/// Frozen diffusion side shared by all clients.
struct FrozenContext {
  const Backbone* backbone = nullptr;
  std::array<int, 3> target_dims{32, 16, 16};
  /// Used when pca_scope is kServer.
  const PcaBasis* server_basis = nullptr;
};

struct LocalResult {
  ModelParams params;
  std::vector<LossBreakdown> trace;  // one entry per mini-batch
};

/// E epochs of mini-batch SGD on the configured local objective.
LocalResult local_update(const FlModel& model, const ClientDataset& client,
                         const ModelParams& global, const FrozenContext& frozen,
                         const LocalConfig& config, Rng& rng);

/// Weighted mean with weights n_k / N.
ModelParams aggregate(std::span<const ModelParams> params, std::span<const std::size_t> sizes);

/// Top-1 accuracy of the model's classifier on `data`.
double evaluate_accuracy(const FlModel& model, const ModelParams& params, const LabeledImages& data);

/// Encoder embeddings (dim x n) in dataset order.
MatrixXd embed_dataset(const FlModel& model, const ModelParams& params, const LabeledImages& data);

struct RoundReport {
  int round = 0;
  std::vector<LossBreakdown> client_losses;  // mean over the client's batches
  std::vector<std::size_t> client_sizes;
  double accuracy = 0.0;
  double seconds = 0.0;

  /// n_k-weighted mean of the client losses.
  LossBreakdown global_loss() const;
};

struct TrainingSetup {
  ModelArch arch;
  LocalConfig local;
  int rounds = 30;
  std::uint64_t seed = 0;
  int threads = 1;
  const std::vector<ClientDataset>* clients = nullptr;
  const LabeledImages* test = nullptr;
  /// Labeled server split; used for linear-probe evaluation in self-supervised mode.
  const LabeledImages* probe = nullptr;
  FrozenContext frozen;
  /// Called after every round, from the orchestrating thread.
  std::function<void(const RoundReport&)> on_round;
};

struct TrainingResult {
  std::vector<RoundReport> reports;
  ModelParams final_params;
  ModelParams initial_params;
};

/// R rounds of broadcast, local updates on all clients, aggregation and
/// evaluation. Deterministic in (setup, seed) regardless of thread count.
TrainingResult run_training(const TrainingSetup& setup);

/// Fits a PCA basis on taps computed from `data` (conditional taps with each
/// sample's class prompt and a zero condition, plus denoising taps).
PcaBasis fit_server_basis(const Backbone& backbone, const LabeledImages& data,
                          const std::array<int, 3>& target_dims, double t_frac, std::uint64_t seed);

}  // namespace difrc
