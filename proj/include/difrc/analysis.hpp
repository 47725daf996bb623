#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "difrc/common.hpp"

namespace difrc {

struct ClusterResult {
  std::vector<int> assignments;
  Eigen::MatrixXd centroids;  // dim x k
  double inertia = 0.0;
  /// Inertia after every assignment step, starting with the seeding.
  std::vector<double> inertia_history;
  int iterations = 0;
  bool converged = false;
};

/// Lloyd iterations from k-means++ seeding on the columns of `points`.
/// Empty clusters are re-seeded to the point farthest from its centroid.
ClusterResult kmeans(const Eigen::MatrixXd& points, int k, int max_iters, std::uint64_t seed);

/// Sum over clusters of the majority label count, divided by the point count.
double cluster_purity(std::span<const int> assignments, std::span<const int> labels);

/// CSV with header `point,cluster,label`.
void write_cluster_csv(const std::filesystem::path& path, std::span<const int> assignments,
                       std::span<const int> labels);

struct ProbeOptions {
  int epochs = 300;
  double lr = 0.5;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

/// Softmax regression on standardized frozen embeddings (columns), trained
/// with full-batch gradient descent; returns top-1 test accuracy.
double linear_probe(const Eigen::MatrixXd& train, std::span<const int> train_labels,
                    const Eigen::MatrixXd& test, std::span<const int> test_labels,
                    const ProbeOptions& options = {});

struct BoundInputs {
  double L0 = 1.0;
  double Lstar = 0.0;
  double L1 = 1.0;
  double L2 = 0.0;
  double B = 0.0;
  double sigma2 = 0.0;
  int C = 10;
  int E = 1;
  double eta = 0.01;
  double xi = 1.0;
};

struct BoundResult {
  double omega1 = 0.0;
  double omega2 = 0.0;
  double denominator = 0.0;
  /// Minimum round count; empty when the denominator is not positive.
  std::optional<double> r_min;
  double eta_max = 0.0;

  bool feasible() const { return r_min.has_value(); }
};

/// Round and learning-rate conditions of the convergence analysis:
/// Omega1 = 2(C-1) L2 E eta B, Omega2 = L1 E eta^2 sigma2,
/// D = xi E eta (2 - L1 eta) - Omega1 - Omega2, R_min = 2(L0 - L*) / D,
/// eta_max = (2 xi - 2(C-1) L2 B) / (L1 (xi + sigma2)).
/// Throws ConfigError when the inputs violate their sign constraints.
BoundResult convergence_bound(const BoundInputs& in);

}  // namespace difrc
