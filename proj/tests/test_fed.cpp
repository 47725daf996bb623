#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "difrc/fed.hpp"

using namespace difrc;

namespace {

// Small images keep the partition tests cheap; the content is irrelevant there.
LabeledImages tiny_dataset(int classes, int per_class, std::uint64_t seed) {
  return generate_synthetic_dataset(classes, per_class, 8, seed);
}

void check_conservation(const LabeledImages& data, const std::vector<ClientDataset>& clients) {
  std::vector<std::size_t> all;
  for (const auto& c : clients) {
    REQUIRE(c.source_indices.size() == c.n());
    for (std::size_t i = 0; i < c.n(); ++i) {
      const std::size_t src = c.source_indices[i];
      REQUIRE(src < data.size());
      CHECK(c.data.labels[i] == data.labels[src]);
      CHECK(c.data.images[i].data == data.images[src].data);
    }
    all.insert(all.end(), c.source_indices.begin(), c.source_indices.end());
  }
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> expected(data.size());
  std::iota(expected.begin(), expected.end(), 0);
  CHECK(all == expected);
}

double label_entropy(const std::vector<int>& hist) {
  const double n = std::accumulate(hist.begin(), hist.end(), 0.0);
  double h = 0.0;
  for (int c : hist) {
    if (c > 0) h -= c / n * std::log(c / n);
  }
  return h;
}

bool same_params(const ModelParams& a, const ModelParams& b) {
  return a.encoder == b.encoder && a.classifier == b.classifier;
}

Backbone untrained_backbone(int classes, int dim, std::uint64_t seed) {
  DenoiserArch arch;
  arch.cond_width = dim;
  ScheduleConfig sc;
  sc.steps = 20;
  Rng rng = make_rng(seed, 1);
  return Backbone{DenoiserNet(arch, derive_seed(seed, 2)), PromptTable(classes, dim, rng), sc, sc.build()};
}

struct SmallRun {
  LabeledImages train, test, probe;
  std::vector<ClientDataset> clients;
  Backbone backbone;
  TrainingSetup setup;

  SmallRun(int k, Ablation ablation, std::uint64_t seed = 0) {
    auto all = generate_synthetic_dataset(10, 14, 16, seed);
    auto [te, rest] = split_balanced(all, 4, seed);
    auto [pr, tr] = split_balanced(rest, 2, seed + 1);
    test = std::move(te);
    probe = std::move(pr);
    train = std::move(tr);
    clients = partition_dirichlet(train, k, 0.5, seed);
    backbone = untrained_backbone(10, 64, seed);
    setup.rounds = 2;
    setup.seed = seed;
    setup.clients = &clients;
    setup.test = &test;
    setup.probe = &probe;
    setup.frozen.backbone = &backbone;
    setup.local.epochs = 1;
    setup.local.batch = 16;
    setup.local.ablation = ablation;
  }
};

}  // namespace

TEST_SUITE("fed") {

TEST_CASE("dirichlet partition with one client") {
  const auto data = tiny_dataset(10, 20, 1);
  const auto clients = partition_dirichlet(data, 1, 0.2, 3);
  REQUIRE(clients.size() == 1);
  CHECK(clients[0].n() == data.size());
  check_conservation(data, clients);
}

TEST_CASE("dirichlet partition conserves the dataset and leaves no client empty") {
  const auto data = tiny_dataset(10, 30, 2);
  for (double alpha : {0.01, 0.05, 0.2, 1.0, 100.0}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto clients = partition_dirichlet(data, 10, alpha, seed);
      REQUIRE(clients.size() == 10);
      check_conservation(data, clients);
      for (const auto& c : clients) {
        CHECK(c.n() > 0);
        const auto h = c.histogram();
        CHECK(std::accumulate(h.begin(), h.end(), std::size_t{0}) == c.n());
      }
    }
  }
  const auto a = partition_dirichlet(data, 10, 0.2, 9);
  const auto b = partition_dirichlet(data, 10, 0.2, 9);
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k].source_indices == b[k].source_indices);
}

TEST_CASE("large alpha gives near-uniform client histograms") {
  const auto data = tiny_dataset(10, 100, 3);
  int good = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    bool ok = true;
    for (const auto& c : partition_dirichlet(data, 10, 1000.0, seed)) {
      const auto h = c.histogram();
      const double n = static_cast<double>(c.n());
      for (int v : h) ok &= std::abs(v / n - 0.1) <= 0.2 * 0.1;
    }
    good += ok;
  }
  CHECK(good >= 95);
}

TEST_CASE("smaller alpha gives lower label entropy") {
  const auto data = tiny_dataset(10, 100, 4);
  auto mean_entropy = [&](double alpha) {
    double total = 0.0;
    int count = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      for (const auto& c : partition_dirichlet(data, 10, alpha, seed)) {
        total += label_entropy(c.histogram());
        ++count;
      }
    }
    return total / count;
  };
  const double e005 = mean_entropy(0.05), e02 = mean_entropy(0.2), e05 = mean_entropy(0.5);
  CHECK(e005 < e02);
  CHECK(e02 < e05);
}

TEST_CASE("dirichlet partition rejects infeasible requests") {
  const auto data = tiny_dataset(2, 2, 5);
  CHECK_THROWS_AS(partition_dirichlet(data, 5, 0.5, 0), DataError);
  CHECK_THROWS_AS(partition_dirichlet(data, 2, 0.0, 0), ConfigError);
  CHECK_THROWS_AS(partition_dirichlet(data, 0, 0.5, 0), ConfigError);
}

TEST_CASE("extreme partition structure over 20 seeds") {
  const auto data = tiny_dataset(10, 30, 6);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto clients = partition_extreme(data, seed);
    REQUIRE(clients.size() == 7);
    check_conservation(data, clients);
    std::vector<int> biased;
    for (int k = 0; k < 6; ++k) {
      const auto h = clients[k].histogram();
      CHECK(std::count_if(h.begin(), h.end(), [](int v) { return v > 0; }) == 1);
      biased.push_back(static_cast<int>(std::max_element(h.begin(), h.end()) - h.begin()));
      CHECK(*std::max_element(h.begin(), h.end()) == 15);
    }
    std::sort(biased.begin(), biased.end());
    CHECK(std::adjacent_find(biased.begin(), biased.end()) == biased.end());
    const auto h6 = clients[6].histogram();
    CHECK(std::all_of(h6.begin(), h6.end(), [](int v) { return v > 0; }));
  }
  const auto a = partition_extreme(data, 4), b = partition_extreme(data, 4);
  for (int k = 0; k < 7; ++k) CHECK(a[k].source_indices == b[k].source_indices);
  CHECK_THROWS_AS(partition_extreme(tiny_dataset(5, 10, 0), 0), DataError);
}

TEST_CASE("long-tail profile") {
  const auto data = tiny_dataset(10, 500, 7);
  const auto flat = make_long_tail(data, 1.0, 0);
  for (int v : flat.histogram()) CHECK(v == 500);

  const auto lt100 = make_long_tail(data, 100.0, 0);
  CHECK(lt100.histogram()[0] == 500);
  CHECK(lt100.histogram()[9] == 5);

  const auto h10 = make_long_tail(data, 10.0, 0).histogram();
  for (int j = 1; j < 10; ++j) CHECK(h10[j] < h10[j - 1]);

  for (double rho : {10.0, 50.0, 100.0}) {
    const auto h = make_long_tail(data, rho, 1).histogram();
    const int mx = *std::max_element(h.begin(), h.end());
    const int mn = *std::min_element(h.begin(), h.end());
    CHECK(mx == 500);
    CHECK(std::abs(mn - 500.0 / rho) <= 1.0);
    for (int j = 0; j < 10; ++j) CHECK(h[j] == static_cast<int>(std::lround(500.0 * std::pow(rho, -j / 9.0))));
  }

  // Subsampling keeps a sub-multiset of the original samples.
  std::map<std::vector<double>, int> pool;
  for (const auto& im : data.images) ++pool[im.data];
  for (const auto& im : lt100.images) CHECK(--pool[im.data] >= 0);

  CHECK_THROWS_AS(make_long_tail(data, 0.5, 0), ConfigError);
}

TEST_CASE("aggregate examples") {
  const ModelParams p{{1.5f, -2.0f}, {0.25f}};
  const std::vector<ModelParams> one = {p};
  const std::vector<std::size_t> s1 = {7};
  CHECK(same_params(aggregate(one, s1), p));

  const std::vector<ModelParams> two = {{{0.0f}, {}}, {{4.0f}, {}}};
  const std::vector<std::size_t> s2 = {1, 3};
  CHECK(aggregate(two, s2).encoder[0] == 3.0f);

  const std::vector<ModelParams> same(5, p);
  const std::vector<std::size_t> s5 = {3, 1, 4, 1, 5};
  CHECK(same_params(aggregate(same, s5), p));

  const std::vector<ModelParams> bad = {{{0.0f}, {}}, {{0.0f, 1.0f}, {}}};
  CHECK_THROWS_AS(aggregate(bad, s2), ShapeError);
  CHECK_THROWS_AS(aggregate(std::vector<ModelParams>{}, std::vector<std::size_t>{}), ConfigError);
}

TEST_CASE("aggregate is order independent") {
  Rng rng = make_rng(12);
  std::vector<ModelParams> ps(6);
  std::vector<std::size_t> sizes;
  for (auto& p : ps) {
    for (int i = 0; i < 50; ++i) p.encoder.push_back(static_cast<real>(standard_normal(rng)));
    for (int i = 0; i < 10; ++i) p.classifier.push_back(static_cast<real>(standard_normal(rng)));
    sizes.push_back(1 + rng() % 40);
  }
  const ModelParams ref = aggregate(ps, sizes);
  std::vector<std::size_t> perm(ps.size());
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<ModelParams> pp;
    std::vector<std::size_t> ss;
    for (std::size_t i : perm) {
      pp.push_back(ps[i]);
      ss.push_back(sizes[i]);
    }
    CHECK(same_params(aggregate(pp, ss), ref));
  }
}

TEST_CASE("local update with zero epochs returns the global parameters") {
  const auto data = generate_synthetic_dataset(10, 2, 16, 0);
  const ClientDataset client{data, std::vector<std::size_t>(data.size())};
  const FlModel model{ModelArch{}};
  const ModelParams global = model.init(4);
  LocalConfig cfg;
  cfg.epochs = 0;
  Rng rng = make_rng(0);
  CHECK(same_params(local_update(model, client, global, {}, cfg, rng).params, global));
}

TEST_CASE("one-client baseline reduces to centralized SGD") {
  SmallRun run(1, Ablation::kBaseline, 3);
  run.setup.rounds = 1;
  run.setup.local.epochs = 3;
  const TrainingResult fl = run_training(run.setup);

  // Direct centralized loop over the same data and shuffle stream.
  const FlModel model(run.setup.arch);
  ModelParams w = model.init(derive_seed(3, 0x1417));
  const LocalConfig& cfg = run.setup.local;
  nn::Sgd enc(cfg.lr, cfg.momentum, cfg.weight_decay), cls(cfg.lr, cfg.momentum, cfg.weight_decay);
  Rng rng = make_rng(3, 0xc11e, 0, 0);
  const LabeledImages& d = run.clients[0].data;
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> losses;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t B = std::min<std::size_t>(cfg.batch, order.size() - b);
      std::vector<const ImageTensor*> ims;
      std::vector<int> ys;
      for (std::size_t i = b; i < b + B; ++i) {
        ims.push_back(&d.images[order[i]]);
        ys.push_back(d.labels[order[i]]);
      }
      FlModel::Cache cache;
      const Mat z = model.encode(w, to_feature_map(ims), &cache);
      const Mat logits = model.classify(w, z);
      Mat dl(logits.rows(), logits.cols());
      double loss = 0.0;
      for (std::size_t i = 0; i < B; ++i) {
        const Eigen::VectorXd l = logits.col(i).cast<double>();
        loss += ce_loss(l, ys[i]);
        dl.col(i) = (1.0 / static_cast<double>(B) * ce_grad(l, ys[i])).cast<real>();
      }
      losses.push_back(loss / static_cast<double>(B));
      nn::Grad gc(w.classifier.size(), 0), ge(w.encoder.size(), 0);
      const Mat dz = model.classifier_backward(w, z, dl, gc);
      model.encoder_backward(w, cache, dz, ge);
      enc.step(w.encoder, ge);
      cls.step(w.classifier, gc);
    }
  }
  CHECK(same_params(fl.final_params, w));
  const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
  CHECK(fl.reports[0].client_losses[0].ce == mean);
}

TEST_CASE("fedprox with zero mu equals fedavg") {
  SmallRun a(3, Ablation::kBaseline), b(3, Ablation::kBaseline), c(3, Ablation::kBaseline);
  b.setup.local.method = BaselineMethod::kFedProx;
  b.setup.local.fedprox_mu = 0.0;
  c.setup.local.method = BaselineMethod::kFedProx;
  c.setup.local.fedprox_mu = 1.0;
  const auto ra = run_training(a.setup), rb = run_training(b.setup), rc = run_training(c.setup);
  CHECK(same_params(ra.final_params, rb.final_params));
  CHECK_FALSE(same_params(ra.final_params, rc.final_params));
}

TEST_CASE("full objective run: reports, determinism, frozen backbone, thread independence") {
  SmallRun a(3, Ablation::kFull), b(3, Ablation::kFull);
  b.setup.threads = 3;
  const auto net_before = a.backbone.net.params().values();
  const auto table_before = a.backbone.table.params().values();

  const auto ra = run_training(a.setup);
  REQUIRE(ra.reports.size() == 2);
  for (int r = 0; r < 2; ++r) {
    CHECK(ra.reports[r].round == r);
    CHECK(ra.reports[r].accuracy >= 0.0);
    CHECK(ra.reports[r].accuracy <= 1.0);
    CHECK(ra.reports[r].client_losses.size() == 3);
    for (const auto& l : ra.reports[r].client_losses) {
      CHECK(l.tdcl > 0.0);
      CHECK(l.ndcr > 0.0);
      CHECK(l.ce > 0.0);
      CHECK(std::abs(l.total - (l.tdcl + l.ndcr + l.ce)) <= 1e-9);
    }
  }
  CHECK(a.backbone.net.params().values() == net_before);
  CHECK(a.backbone.table.params().values() == table_before);

  const auto ra2 = run_training(a.setup);
  const auto rb = run_training(b.setup);
  CHECK(same_params(ra.final_params, ra2.final_params));
  CHECK(same_params(ra.final_params, rb.final_params));
  for (int r = 0; r < 2; ++r) {
    CHECK(ra.reports[r].accuracy == rb.reports[r].accuracy);
    for (int k = 0; k < 3; ++k) CHECK(ra.reports[r].client_losses[k].total == rb.reports[r].client_losses[k].total);
  }
}

TEST_CASE("ablations switch loss terms") {
  for (auto [ab, t, n] : {std::tuple{Ablation::kTdclOnly, true, false}, {Ablation::kNdcrOnly, false, true},
                          {Ablation::kBaseline, false, false}}) {
    SmallRun run(2, ab);
    run.setup.rounds = 1;
    const auto r = run_training(run.setup);
    for (const auto& l : r.reports[0].client_losses) {
      CHECK((l.tdcl > 0.0) == t);
      CHECK((l.ndcr > 0.0) == n);
      CHECK(l.ce > 0.0);
    }
  }
}

TEST_CASE("self-supervised updates never see labels") {
  SmallRun run(1, Ablation::kFull);
  run.setup.local.mode = TrainingMode::kSelfSupervised;
  ClientDataset relabeled = run.clients[0];
  for (auto& y : relabeled.data.labels) y = (y + 3) % 10;
  const FlModel model(run.setup.arch);
  const ModelParams global = model.init(1);
  Rng r1 = make_rng(5), r2 = make_rng(5);
  const auto a = local_update(model, run.clients[0], global, run.setup.frozen, run.setup.local, r1);
  const auto b = local_update(model, relabeled, global, run.setup.frozen, run.setup.local, r2);
  CHECK(same_params(a.params, b.params));
  for (const auto& l : a.trace) CHECK(l.ce == 0.0);

  const auto tr = run_training(run.setup);
  CHECK(tr.reports.size() == 2);
  run.setup.probe = nullptr;
  CHECK_THROWS_AS(run_training(run.setup), ConfigError);
}

TEST_CASE("server-scoped PCA basis") {
  SmallRun run(2, Ablation::kFull);
  run.setup.rounds = 1;
  run.setup.local.pca_scope = PcaScope::kServer;
  CHECK_THROWS_AS(run_training(run.setup), ConfigError);
  const PcaBasis basis = fit_server_basis(run.backbone, run.probe, {32, 16, 16}, 0.15, 0);
  CHECK(basis.dim() == 64);
  run.setup.frozen.server_basis = &basis;
  CHECK(run_training(run.setup).reports.size() == 1);
}

TEST_CASE("non-finite parameters abort the local update") {
  SmallRun run(1, Ablation::kBaseline);
  const FlModel model(run.setup.arch);
  ModelParams global = model.init(1);
  global.encoder[0] = NAN;
  Rng rng = make_rng(0);
  CHECK_THROWS_AS(local_update(model, run.clients[0], global, {}, run.setup.local, rng), NumericError);
}

}  // TEST_SUITE
