#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "difrc/analysis.hpp"

using namespace difrc;

namespace {

Eigen::MatrixXd blobs(int per_blob, const std::vector<std::pair<double, double>>& centers, double radius,
                      Rng& rng, std::vector<int>& labels) {
  Eigen::MatrixXd pts(2, per_blob * static_cast<int>(centers.size()));
  std::uniform_real_distribution<double> u(-radius, radius);
  labels.clear();
  int col = 0;
  for (std::size_t b = 0; b < centers.size(); ++b) {
    for (int i = 0; i < per_blob; ++i, ++col) {
      pts(0, col) = centers[b].first + u(rng);
      pts(1, col) = centers[b].second + u(rng);
      labels.push_back(static_cast<int>(b));
    }
  }
  return pts;
}

double inertia_oracle(const Eigen::MatrixXd& pts, const ClusterResult& r) {
  double s = 0;
  for (Eigen::Index i = 0; i < pts.cols(); ++i) s += (pts.col(i) - r.centroids.col(r.assignments[i])).squaredNorm();
  return s;
}

// Independent scalar evaluation of the round and step-size conditions.
std::pair<double, double> bound_oracle(const BoundInputs& in) {
  const double c1 = in.C - 1.0;
  const double o1 = 2.0 * c1 * in.L2 * in.E * in.eta * in.B;
  const double o2 = in.L1 * in.E * in.eta * in.eta * in.sigma2;
  const double d = in.xi * in.E * in.eta * 2.0 - in.xi * in.E * in.eta * in.L1 * in.eta - o1 - o2;
  const double r = d > 0 ? 2.0 * (in.L0 - in.Lstar) / d : NAN;
  const double em = (2.0 * in.xi - 2.0 * c1 * in.L2 * in.B) / (in.L1 * in.xi + in.L1 * in.sigma2);
  return {r, em};
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("kmeans with k equal to point count") {
  Rng rng = make_rng(1);
  Eigen::MatrixXd pts(3, 7);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = standard_normal(rng);
  const ClusterResult r = kmeans(pts, 7, 50, 3);
  CHECK(r.inertia == doctest::Approx(0.0));
  std::vector<int> a = r.assignments;
  std::sort(a.begin(), a.end());
  CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
}

TEST_CASE("kmeans separates well-separated blobs") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = make_rng(seed, 9);
    std::vector<int> labels;
    const Eigen::MatrixXd pts = blobs(30, {{0.0, 0.0}, {10.0, 0.0}}, 0.5, rng, labels);
    const ClusterResult r = kmeans(pts, 2, 100, seed);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      // Same-blob pairs share a cluster, cross-blob pairs do not.
      CHECK((r.assignments[i] == r.assignments[0]) == (labels[i] == labels[0]));
    }
    CHECK(cluster_purity(r.assignments, labels) == 1.0);
  }
}

TEST_CASE("kmeans inertia is monotone and terminal assignment is a fixpoint") {
  Rng rng = make_rng(4);
  std::vector<int> labels;
  const Eigen::MatrixXd pts = blobs(40, {{0, 0}, {3, 1}, {1, 4}, {5, 5}, {2, 2}}, 2.0, rng, labels);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ClusterResult r = kmeans(pts, 5, 200, seed);
    for (std::size_t i = 1; i < r.inertia_history.size(); ++i)
      CHECK(r.inertia_history[i] <= r.inertia_history[i - 1] + 1e-9);
    CHECK(r.converged);
    CHECK(r.inertia == doctest::Approx(inertia_oracle(pts, r)).epsilon(1e-12));
    for (Eigen::Index i = 0; i < pts.cols(); ++i) {
      const double own = (pts.col(i) - r.centroids.col(r.assignments[i])).squaredNorm();
      for (int c = 0; c < 5; ++c) CHECK(own <= (pts.col(i) - r.centroids.col(c)).squaredNorm() + 1e-12);
    }
    const ClusterResult again = kmeans(pts, 5, 200, seed);
    CHECK(again.assignments == r.assignments);
  }
}

TEST_CASE("kmeans handles duplicate points and rejects bad input") {
  Eigen::MatrixXd dup = Eigen::MatrixXd::Zero(2, 6);
  dup(0, 5) = 1.0;
  const ClusterResult r = kmeans(dup, 3, 20, 0);
  CHECK(r.assignments.size() == 6);
  CHECK(std::isfinite(r.inertia));
  CHECK_THROWS_AS(kmeans(dup, 7, 10, 0), DataError);
  CHECK_THROWS_AS(kmeans(dup, 0, 10, 0), ConfigError);
}

TEST_CASE("cluster purity examples") {
  const std::vector<int> l = {0, 1, 2, 2, 1};
  CHECK(cluster_purity(l, l) == 1.0);
  CHECK(cluster_purity(std::vector<int>{0, 0, 0, 0}, std::vector<int>{0, 1, 0, 1}) == 0.5);
  // {A:3,B:1}, {B:2}, {A:1,B:1}
  const std::vector<int> a = {0, 0, 0, 0, 1, 1, 2, 2};
  const std::vector<int> y = {0, 0, 0, 1, 1, 1, 0, 1};
  CHECK(cluster_purity(a, y) == 0.75);
  CHECK_THROWS_AS(cluster_purity(a, l), ShapeError);
}

TEST_CASE("cluster csv") {
  const auto path = std::filesystem::temp_directory_path() / "difrc_clusters.csv";
  write_cluster_csv(path, std::vector<int>{1, 0}, std::vector<int>{3, 4});
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == "point,cluster,label\n0,1,3\n1,0,4\n");
  std::filesystem::remove(path);
}

TEST_CASE("linear probe separable and chance-level data") {
  Rng rng = make_rng(21);
  const int C = 10, per = 30, d = 16;
  auto make = [&](Eigen::MatrixXd& x, std::vector<int>& y) {
    x.resize(d, C * per);
    y.clear();
    for (int c = 0; c < C; ++c) {
      for (int i = 0; i < per; ++i) {
        const int col = c * per + i;
        for (int k = 0; k < d; ++k) x(k, col) = 0.3 * standard_normal(rng) + (k == c ? 4.0 : 0.0);
        y.push_back(c);
      }
    }
  };
  Eigen::MatrixXd xtr, xte;
  std::vector<int> ytr, yte;
  make(xtr, ytr);
  make(xte, yte);
  CHECK(linear_probe(xtr, ytr, xte, yte) >= 0.99);

  std::vector<int> shuffled = ytr;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  // Pure-noise features with unrelated labels.
  Eigen::MatrixXd ntr(d, C * per), nte(d, C * 100);
  for (Eigen::Index i = 0; i < ntr.size(); ++i) ntr.data()[i] = standard_normal(rng);
  for (Eigen::Index i = 0; i < nte.size(); ++i) nte.data()[i] = standard_normal(rng);
  std::vector<int> nyte(C * 100);
  for (int i = 0; i < C * 100; ++i) nyte[i] = i % C;
  const double chance = linear_probe(ntr, shuffled, nte, nyte);
  CHECK(std::abs(chance - 0.1) <= 0.05);

  CHECK(linear_probe(xtr, ytr, xte, yte, {.seed = 5}) == linear_probe(xtr, ytr, xte, yte, {.seed = 5}));
  CHECK_THROWS_AS(linear_probe(Eigen::MatrixXd(d, 0), {}, xte, yte), DataError);
  CHECK_THROWS_AS(linear_probe(xtr, ytr, Eigen::MatrixXd(d + 1, 3), std::vector<int>{0, 1, 2}), ShapeError);
}

TEST_CASE("convergence bound worked example") {
  BoundInputs in;
  in.L0 = 1.5;
  in.Lstar = 1.0;
  in.L1 = 1.0;
  in.L2 = 0.0;
  in.B = 0.0;
  in.sigma2 = 0.0;
  in.E = 1;
  in.eta = 1.0;
  in.xi = 1.0;
  const BoundResult r = convergence_bound(in);
  CHECK(r.omega1 == 0.0);
  CHECK(r.omega2 == 0.0);
  CHECK(r.denominator == 1.0);
  REQUIRE(r.feasible());
  CHECK(*r.r_min == 1.0);
  CHECK(r.eta_max == 2.0);

  in.eta = 2.0;
  CHECK_FALSE(convergence_bound(in).feasible());
  in.eta = 2.5;
  CHECK_FALSE(convergence_bound(in).feasible());
}

TEST_CASE("convergence bound is monotone in xi") {
  BoundInputs in;
  in.L0 = 3.0;
  in.Lstar = 0.5;
  in.L1 = 2.0;
  in.L2 = 0.01;
  in.B = 0.5;
  in.sigma2 = 0.3;
  in.E = 2;
  in.eta = 0.1;
  double prev = INFINITY;
  for (double xi : {0.2, 0.4, 0.6, 0.8, 1.0}) {
    in.xi = xi;
    const BoundResult r = convergence_bound(in);
    REQUIRE(r.feasible());
    CHECK(*r.r_min < prev);
    prev = *r.r_min;
  }
}

TEST_CASE("convergence bound matches an independent evaluation") {
  Rng rng = make_rng(33);
  std::uniform_real_distribution<double> u(0.01, 2.0);
  for (int i = 0; i < 20; ++i) {
    BoundInputs in;
    in.Lstar = u(rng);
    in.L0 = in.Lstar + u(rng);
    in.L1 = u(rng);
    in.L2 = 0.01 * u(rng);
    in.B = u(rng);
    in.sigma2 = u(rng);
    in.C = 2 + i % 9;
    in.E = 1 + i % 3;
    in.eta = 0.2 * u(rng);
    in.xi = u(rng);
    const BoundResult r = convergence_bound(in);
    const auto [rmin, emax] = bound_oracle(in);
    CHECK(r.eta_max == doctest::Approx(emax).epsilon(1e-12));
    CHECK(r.feasible() == !std::isnan(rmin));
    if (r.feasible()) CHECK(*r.r_min == doctest::Approx(rmin).epsilon(1e-12));
  }
}

TEST_CASE("convergence bound rejects invalid constants") {
  BoundInputs in;
  in.L1 = 0.0;
  CHECK_THROWS_AS(convergence_bound(in), ConfigError);
  in = {};
  in.B = -1.0;
  CHECK_THROWS_AS(convergence_bound(in), ConfigError);
  in = {};
  in.L0 = 0.0;
  in.Lstar = 1.0;
  CHECK_THROWS_AS(convergence_bound(in), ConfigError);
}

}  // TEST_SUITE
