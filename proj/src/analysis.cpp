#include "difrc/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

namespace difrc {

namespace {

// Nearest-centroid assignment; returns the inertia.
double assign(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centroids, std::vector<int>& out,
              std::vector<double>& dist) {
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    int best = 0;
    double best_d = (points.col(i) - centroids.col(0)).squaredNorm();
    for (Eigen::Index c = 1; c < centroids.cols(); ++c) {
      const double d = (points.col(i) - centroids.col(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    out[static_cast<std::size_t>(i)] = best;
    dist[static_cast<std::size_t>(i)] = best_d;
    inertia += best_d;
  }
  return inertia;
}

}  // namespace

ClusterResult kmeans(const Eigen::MatrixXd& points, int k, int max_iters, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(points.cols());
  if (k < 1) throw ConfigError("k must be >= 1");
  if (n < static_cast<std::size_t>(k)) {
    throw DataError("kmeans: " + std::to_string(n) + " points for k = " + std::to_string(k));
  }
  if (max_iters < 0) throw ConfigError("max_iters must be >= 0");
  Rng rng = make_rng(seed, 0x6b6d);

  // k-means++ seeding.
  ClusterResult r;
  r.centroids.resize(points.rows(), k);
  std::vector<bool> chosen(n, false);
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  r.centroids.col(0) = points.col(static_cast<Eigen::Index>(first));
  chosen[first] = true;
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = (points.col(static_cast<Eigen::Index>(i)) - r.centroids.col(0)).squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = 0;
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        if (u < d2[i]) {
          pick = i;
          break;
        }
        u -= d2[i];
      }
      while (d2[pick] <= 0.0) --pick;
    } else {
      // Remaining points coincide with centroids: take any unchosen one.
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < n; ++i) {
        if (!chosen[i]) rest.push_back(i);
      }
      pick = rest[std::uniform_int_distribution<std::size_t>(0, rest.size() - 1)(rng)];
    }
    chosen[pick] = true;
    r.centroids.col(c) = points.col(static_cast<Eigen::Index>(pick));
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (points.col(static_cast<Eigen::Index>(i)) - r.centroids.col(c)).squaredNorm());
    }
  }

  r.assignments.assign(n, 0);
  std::vector<double> dist(n);
  r.inertia = assign(points, r.centroids, r.assignments, dist);
  r.inertia_history.push_back(r.inertia);
  for (int iter = 0; iter < max_iters; ++iter) {
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(points.rows(), k);
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.col(r.assignments[i]) += points.col(static_cast<Eigen::Index>(i));
      ++counts[static_cast<std::size_t>(r.assignments[i])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        r.centroids.col(c) = sums.col(c) / counts[static_cast<std::size_t>(c)];
      }
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      const auto far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
      r.centroids.col(c) = points.col(static_cast<Eigen::Index>(far));
      dist[far] = 0.0;
    }
    std::vector<int> next(n);
    r.inertia = assign(points, r.centroids, next, dist);
    r.inertia_history.push_back(r.inertia);
    r.iterations = iter + 1;
    const bool same = next == r.assignments;
    r.assignments = std::move(next);
    if (same) {
      r.converged = true;
      break;
    }
  }
  return r;
}

double cluster_purity(std::span<const int> assignments, std::span<const int> labels) {
  if (assignments.size() != labels.size()) throw ShapeError("purity: assignments and labels differ in length");
  if (assignments.empty()) throw DataError("purity of an empty set");
  std::map<int, std::map<int, int>> counts;
  for (std::size_t i = 0; i < labels.size(); ++i) ++counts[assignments[i]][labels[i]];
  std::size_t majority = 0;
  for (const auto& [cluster, hist] : counts) {
    int best = 0;
    for (const auto& [label, c] : hist) best = std::max(best, c);
    majority += static_cast<std::size_t>(best);
  }
  return static_cast<double>(majority) / static_cast<double>(labels.size());
}

void write_cluster_csv(const std::filesystem::path& path, std::span<const int> assignments,
                       std::span<const int> labels) {
  if (assignments.size() != labels.size()) throw ShapeError("cluster csv: length mismatch");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "point,cluster,label\n";
  for (std::size_t i = 0; i < labels.size(); ++i) out << i << ',' << assignments[i] << ',' << labels[i] << '\n';
}

double linear_probe(const Eigen::MatrixXd& train, std::span<const int> train_labels,
                    const Eigen::MatrixXd& test, std::span<const int> test_labels,
                    const ProbeOptions& opt) {
  if (train.cols() == 0 || test.cols() == 0) throw DataError("linear probe needs non-empty splits");
  if (train.rows() != test.rows()) throw ShapeError("linear probe: embedding dims differ");
  if (static_cast<std::size_t>(train.cols()) != train_labels.size() ||
      static_cast<std::size_t>(test.cols()) != test_labels.size()) {
    throw ShapeError("linear probe: one label per embedding required");
  }
  int classes = 0;
  for (int y : train_labels) classes = std::max(classes, y + 1);
  for (int y : test_labels) classes = std::max(classes, y + 1);
  if (*std::min_element(train_labels.begin(), train_labels.end()) < 0) throw RangeError("negative label");

  const Eigen::VectorXd mean = train.rowwise().mean();
  Eigen::VectorXd sd = ((train.colwise() - mean).array().square().rowwise().mean()).sqrt().matrix();
  for (Eigen::Index i = 0; i < sd.size(); ++i) sd(i) = sd(i) > 1e-12 ? sd(i) : 1.0;
  const Eigen::MatrixXd X = (train.colwise() - mean).array().colwise() / sd.array();
  const Eigen::MatrixXd Xt = (test.colwise() - mean).array().colwise() / sd.array();

  const auto n = static_cast<double>(train.cols());
  Rng rng = make_rng(opt.seed, 0x9b);
  Eigen::MatrixXd W(classes, train.rows());
  for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = 0.01 * standard_normal(rng);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(classes);
  Eigen::MatrixXd vW = Eigen::MatrixXd::Zero(W.rows(), W.cols());
  Eigen::VectorXd vb = Eigen::VectorXd::Zero(classes);
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(classes, train.cols());
  for (std::size_t i = 0; i < train_labels.size(); ++i) Y(train_labels[i], static_cast<Eigen::Index>(i)) = 1.0;

  for (int e = 0; e < opt.epochs; ++e) {
    Eigen::MatrixXd P = (W * X).colwise() + b;
    for (Eigen::Index i = 0; i < P.cols(); ++i) {
      P.col(i) = (P.col(i).array() - P.col(i).maxCoeff()).exp();
      P.col(i) /= P.col(i).sum();
    }
    const Eigen::MatrixXd G = (P - Y) / n;
    const Eigen::MatrixXd gW = G * X.transpose() + opt.weight_decay * W;
    const Eigen::VectorXd gb = G.rowwise().sum();
    vW = opt.momentum * vW + gW;
    vb = opt.momentum * vb + gb;
    W -= opt.lr * vW;
    b -= opt.lr * vb;
  }

  const Eigen::MatrixXd logits = (W * Xt).colwise() + b;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    Eigen::Index best = 0;
    logits.col(i).maxCoeff(&best);
    if (best == test_labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test_labels.size());
}

BoundResult convergence_bound(const BoundInputs& in) {
  if (!(in.L1 > 0.0) || !(in.eta > 0.0) || !(in.xi > 0.0) || in.E < 1 || in.C < 1) {
    throw ConfigError("bound: L1, eta, xi, E and C must be positive");
  }
  if (in.L2 < 0.0 || in.B < 0.0 || in.sigma2 < 0.0) {
    throw ConfigError("bound: L2, B and sigma2 must be non-negative");
  }
  if (!(in.L0 >= in.Lstar)) throw ConfigError("bound: L0 must be >= L*");
  BoundResult r;
  const double E = in.E;
  const double cm1 = in.C - 1;
  r.omega1 = 2.0 * cm1 * in.L2 * E * in.eta * in.B;
  r.omega2 = in.L1 * E * in.eta * in.eta * in.sigma2;
  r.denominator = in.xi * E * in.eta * (2.0 - in.L1 * in.eta) - r.omega1 - r.omega2;
  if (r.denominator > 0.0) r.r_min = 2.0 * (in.L0 - in.Lstar) / r.denominator;
  r.eta_max = (2.0 * in.xi - 2.0 * cm1 * in.L2 * in.B) / (in.L1 * (in.xi + in.sigma2));
  return r;
}

}  // namespace difrc
