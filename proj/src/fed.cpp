#include "difrc/fed.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

#include "difrc/analysis.hpp"

namespace difrc {

namespace {

std::vector<std::vector<std::size_t>> indices_by_class(const LabeledImages& data) {
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(data.num_classes));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int y = data.labels[i];
    if (y < 0 || y >= data.num_classes) throw DataError("label " + std::to_string(y) + " out of range");
    out[static_cast<std::size_t>(y)].push_back(i);
  }
  return out;
}

ClientDataset make_client(const LabeledImages& data, std::vector<std::size_t> idx) {
  std::sort(idx.begin(), idx.end());
  ClientDataset c;
  c.data = data.subset(idx);
  c.source_indices = std::move(idx);
  return c;
}

// Largest-remainder apportionment of n items by proportions p (sum 1).
std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& p) {
  std::vector<std::size_t> counts(p.size());
  std::vector<std::pair<double, std::size_t>> rem(p.size());
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double exact = p[k] * static_cast<double>(n);
    counts[k] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[k];
    rem[k] = {exact - std::floor(exact), k};
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[rem[i % rem.size()].second];
  return counts;
}

}  // namespace

std::vector<ClientDataset> partition_dirichlet(const LabeledImages& data, int clients, double alpha,
                                               std::uint64_t seed) {
  if (clients < 1) throw ConfigError("client count must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("Dirichlet alpha must be > 0");
  if (data.size() < static_cast<std::size_t>(clients)) {
    throw DataError("cannot partition " + std::to_string(data.size()) + " samples over " +
                    std::to_string(clients) + " clients");
  }
  Rng rng = make_rng(seed, 0xd1);
  const auto K = static_cast<std::size_t>(clients);
  std::vector<std::vector<std::size_t>> shards(K);
  std::gamma_distribution<double> gamma(alpha, 1.0);
  for (auto& idx : indices_by_class(data)) {
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<double> p(K);
    double sum = 0.0;
    for (auto& v : p) sum += (v = gamma(rng));
    if (sum > 0.0) {
      for (auto& v : p) v /= sum;
    } else {
      // Every draw underflowed (tiny alpha): the limit is a one-hot vector.
      std::fill(p.begin(), p.end(), 0.0);
      p[std::uniform_int_distribution<std::size_t>(0, K - 1)(rng)] = 1.0;
    }
    const auto counts = apportion(idx.size(), p);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t i = 0; i < counts[k]; ++i) shards[k].push_back(idx[pos++]);
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (!shards[k].empty()) continue;
    std::size_t largest = 0;
    for (std::size_t j = 1; j < K; ++j) {
      if (shards[j].size() > shards[largest].size()) largest = j;
    }
    shards[k].push_back(shards[largest].back());
    shards[largest].pop_back();
  }
  std::vector<ClientDataset> out;
  out.reserve(K);
  for (auto& s : shards) out.push_back(make_client(data, std::move(s)));
  return out;
}

std::vector<ClientDataset> partition_extreme(const LabeledImages& data, std::uint64_t seed,
                                             double biased_share) {
  constexpr int kBiased = 6;
  if (data.num_classes < kBiased) {
    throw DataError("NID2 needs at least 6 classes, dataset has " + std::to_string(data.num_classes));
  }
  if (!(biased_share > 0.0 && biased_share < 1.0)) throw ConfigError("biased_share must be in (0, 1)");
  Rng rng = make_rng(seed, 0xd2);
  auto by_class = indices_by_class(data);
  for (std::size_t j = 0; j < by_class.size(); ++j) {
    if (by_class[j].empty()) throw DataError("NID2: class " + std::to_string(j) + " has no samples");
  }
  std::vector<int> classes(static_cast<std::size_t>(data.num_classes));
  std::iota(classes.begin(), classes.end(), 0);
  for (int i = 0; i < kBiased; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), classes.size() - 1);
    std::swap(classes[static_cast<std::size_t>(i)], classes[pick(rng)]);
  }
  std::vector<std::vector<std::size_t>> shards(kBiased + 1);
  std::vector<bool> biased(by_class.size(), false);
  for (int k = 0; k < kBiased; ++k) {
    auto& idx = by_class[static_cast<std::size_t>(classes[static_cast<std::size_t>(k)])];
    if (idx.size() < 2) throw DataError("NID2: biased classes need at least 2 samples");
    std::shuffle(idx.begin(), idx.end(), rng);
    auto take = static_cast<std::size_t>(std::lround(biased_share * static_cast<double>(idx.size())));
    take = std::clamp<std::size_t>(take, 1, idx.size() - 1);
    shards[static_cast<std::size_t>(k)].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    shards[kBiased].insert(shards[kBiased].end(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end());
    biased[static_cast<std::size_t>(classes[static_cast<std::size_t>(k)])] = true;
  }
  for (std::size_t j = 0; j < by_class.size(); ++j) {
    if (!biased[j]) shards[kBiased].insert(shards[kBiased].end(), by_class[j].begin(), by_class[j].end());
  }
  std::vector<ClientDataset> out;
  for (auto& s : shards) out.push_back(make_client(data, std::move(s)));
  return out;
}

LabeledImages make_long_tail(const LabeledImages& data, double rho, std::uint64_t seed) {
  if (!(rho >= 1.0)) throw ConfigError("long-tail ratio rho must be >= 1");
  auto by_class = indices_by_class(data);
  const int C = data.num_classes;
  std::size_t n_max = 0;
  for (const auto& idx : by_class) n_max = std::max(n_max, idx.size());
  Rng rng = make_rng(seed, 0xd3);
  std::vector<std::size_t> keep;
  for (int j = 0; j < C; ++j) {
    const double expo = C > 1 ? -static_cast<double>(j) / (C - 1) : 0.0;
    const auto target =
        static_cast<std::size_t>(std::llround(static_cast<double>(n_max) * std::pow(rho, expo)));
    auto& idx = by_class[static_cast<std::size_t>(j)];
    if (idx.size() < target) {
      throw DataError("long tail: class " + std::to_string(j) + " has " + std::to_string(idx.size()) +
                      " samples, needs " + std::to_string(target));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(target));
  }
  std::sort(keep.begin(), keep.end());
  return data.subset(keep);
}

namespace {

struct ExtractionContext {
  const DenoiserNet& net;
  const PromptTable& table;
  const NoiseSchedule& schedule;
  int chunk;
};

// Conditional taps for (image, cond column, prompt) triples, in chunks.
// `on_chunk` receives each chunk's taps and the index of its first triple.
template <typename F>
void for_conditional_chunks(const ExtractionContext& ctx, const std::vector<const ImageTensor*>& images,
                            const Mat& conds, const std::vector<int>& ids, F&& on_chunk) {
  const std::size_t n = images.size();
  for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(ctx.chunk)) {
    const std::size_t len = std::min(n - begin, static_cast<std::size_t>(ctx.chunk));
    const auto taps = conditional_taps(
        ctx.net, std::span<const ImageTensor* const>(images.data() + begin, len),
        conds.middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(len)),
        std::span<const int>(ids.data() + begin, len), ctx.table);
    on_chunk(taps, begin);
  }
}

std::array<Eigen::MatrixXd, 3> concat_tokens(const std::array<Eigen::MatrixXd, 3>& a,
                                             const std::array<Eigen::MatrixXd, 3>& b) {
  std::array<Eigen::MatrixXd, 3> out;
  for (int i = 0; i < 3; ++i) {
    out[i].resize(a[i].rows(), a[i].cols() + b[i].cols());
    out[i] << a[i], b[i];
  }
  return out;
}

void check_finite(const RealBuffer& v, const char* what) {
  for (real x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite ") + what + " gradient");
  }
}

}  // namespace

LocalResult local_update(const FlModel& model, const ClientDataset& client,
                         const ModelParams& global, const FrozenContext& frozen,
                         const LocalConfig& config, Rng& rng) {
  if (client.n() == 0) throw DataError("local_update on an empty client");
  if (config.epochs < 0 || config.batch < 1) throw ConfigError("epochs must be >= 0 and batch >= 1");
  LocalResult result;
  result.params = global;
  if (config.epochs == 0) return result;

  const bool tdcl_on = uses_tdcl(config.ablation);
  const bool ndcr_on = uses_ndcr(config.ablation);
  const bool ce_on = config.mode == TrainingMode::kSupervised;
  const bool diffusion = tdcl_on || ndcr_on;
  if (diffusion && frozen.backbone == nullptr) throw ConfigError("diffusion losses need a backbone");
  if (diffusion && frozen.backbone->net.arch().cond_width != model.arch().dim) {
    throw ConfigError("encoder dim must equal the denoiser condition width");
  }
  if (diffusion && config.pca_scope == PcaScope::kServer && frozen.server_basis == nullptr) {
    throw ConfigError("server PCA scope needs a server basis");
  }

  ModelParams& w = result.params;
  nn::Sgd enc_opt(config.lr, config.momentum, config.weight_decay);
  nn::Sgd cls_opt(config.lr, config.momentum, config.weight_decay);
  const int C = model.arch().num_classes;
  const int dim = model.arch().dim;

  std::optional<PcaBasis> basis;
  if (diffusion && config.pca_scope == PcaScope::kServer) basis = *frozen.server_basis;
  std::vector<double> running_u;
  std::vector<bool> running_init;
  int t_denoise = 0;
  if (diffusion) {
    running_u.assign(static_cast<std::size_t>(frozen.backbone->table.rows()), 0.0);
    running_init.assign(running_u.size(), false);
    t_denoise = denoising_step(config.t_frac, frozen.backbone->schedule.steps());
  }

  std::vector<std::size_t> order(client.n());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(config.batch)) {
      const std::size_t B = std::min(order.size() - begin, static_cast<std::size_t>(config.batch));
      std::vector<const ImageTensor*> images(B);
      std::vector<int> labels(B);
      for (std::size_t i = 0; i < B; ++i) {
        images[i] = &client.data.images[order[begin + i]];
        labels[i] = client.data.labels[order[begin + i]];
      }
      FlModel::Cache cache;
      const Mat z = model.encode(w, to_feature_map(images), &cache);
      const Eigen::MatrixXd zd = z.cast<double>();
      Mat dz = Mat::Zero(z.rows(), z.cols());
      double tdcl_sum = 0.0, ndcr_sum = 0.0, ce_sum = 0.0;
      RealBuffer cls_grad(w.classifier.size(), real(0));

      if (diffusion) {
        const Backbone& bb = *frozen.backbone;
        const ExtractionContext ctx{bb.net, bb.table, bb.schedule, std::max(1, config.extraction_chunk)};
        std::vector<PromptSelection> sel(B);
        for (std::size_t i = 0; i < B; ++i) {
          sel[i] = select_prompts(config.mode, std::optional<int>(labels[i]), C, config.neg_pool_size,
                                  rng, config.pool_includes_base);
        }
        std::optional<std::array<nn::FeatureMap, 4>> den_taps;
        if (ndcr_on) {
          std::vector<int> ids(B);
          for (std::size_t i = 0; i < B; ++i) ids[i] = sel[i].consistency_id;
          den_taps = denoising_taps(bb.net, images, ids, t_denoise, bb.schedule, bb.table, rng);
        }
        // Triples for conditional extraction: per sample the positive then the negatives.
        std::vector<const ImageTensor*> cimg;
        std::vector<int> cids;
        std::vector<std::size_t> owner;
        if (tdcl_on) {
          for (std::size_t i = 0; i < B; ++i) {
            cimg.push_back(images[i]);
            cids.push_back(sel[i].positive_id);
            owner.push_back(i);
            for (int j : sel[i].negative_ids) {
              cimg.push_back(images[i]);
              cids.push_back(j);
              owner.push_back(i);
            }
          }
        }
        Mat conds(dim, static_cast<Eigen::Index>(cimg.size()));
        for (std::size_t c = 0; c < cimg.size(); ++c) conds.col(static_cast<Eigen::Index>(c)) = z.col(static_cast<Eigen::Index>(owner[c]));

        Eigen::MatrixXd targets(dim, static_cast<Eigen::Index>(cimg.size()));
        for_conditional_chunks(ctx, cimg, conds, cids, [&](const auto& taps, std::size_t first) {
          if (!basis) {
            auto tokens = tap_tokens(taps);
            if (den_taps) tokens = concat_tokens(tokens, tap_tokens(*den_taps));
            basis = fit_pca(tokens, frozen.target_dims);
          }
          const Eigen::MatrixXd f = fuse(taps, *basis);
          targets.middleCols(static_cast<Eigen::Index>(first), f.cols()) = f;
        });
        if (den_taps && !basis) basis = fit_pca(tap_tokens(*den_taps), frozen.target_dims);
        if (basis->dim() != dim) throw ConfigError("PCA target dims must sum to the encoder dim");

        if (tdcl_on) {
          // U per target, smoothed per prompt id across the client's batches.
          std::vector<double> u(cimg.size());
          std::vector<double> u_sum(running_u.size(), 0.0);
          std::vector<int> u_cnt(running_u.size(), 0);
          for (std::size_t c = 0; c < cimg.size(); ++c) {
            u[c] = norm_factor(zd, targets.col(static_cast<Eigen::Index>(c)));
            u_sum[static_cast<std::size_t>(cids[c])] += u[c];
            ++u_cnt[static_cast<std::size_t>(cids[c])];
          }
          for (std::size_t j = 0; j < running_u.size(); ++j) {
            if (u_cnt[j] > 0 && !running_init[j]) {
              running_u[j] = u_sum[j] / u_cnt[j];
              running_init[j] = true;
            }
          }
          for (std::size_t c = 0; c < cimg.size(); ++c) {
            const auto j = static_cast<std::size_t>(cids[c]);
            u[c] = std::max(kMinNormFactor, config.u_decay * running_u[j] + (1.0 - config.u_decay) * u[c]);
          }
          for (std::size_t j = 0; j < running_u.size(); ++j) {
            if (u_cnt[j] > 0) {
              running_u[j] = config.u_decay * running_u[j] + (1.0 - config.u_decay) * (u_sum[j] / u_cnt[j]);
            }
          }
          std::size_t c = 0;
          for (std::size_t i = 0; i < B; ++i) {
            const std::size_t pos = c;
            const std::size_t nneg = sel[i].negative_ids.size();
            const Eigen::MatrixXd negs = targets.middleCols(static_cast<Eigen::Index>(pos + 1), static_cast<Eigen::Index>(nneg));
            const std::vector<double> u_negs(u.begin() + static_cast<std::ptrdiff_t>(pos + 1),
                                             u.begin() + static_cast<std::ptrdiff_t>(pos + 1 + nneg));
            const TdclResult r = tdcl(zd.col(static_cast<Eigen::Index>(i)), targets.col(static_cast<Eigen::Index>(pos)),
                                      u[pos], negs, u_negs, config.tau);
            tdcl_sum += r.loss;
            dz.col(static_cast<Eigen::Index>(i)) += (config.weights.tdcl / static_cast<double>(B) * r.grad).cast<real>();
            c += 1 + nneg;
          }
        }
        if (ndcr_on) {
          const Eigen::MatrixXd h = fuse(*den_taps, *basis);
          for (std::size_t i = 0; i < B; ++i) {
            const auto col = static_cast<Eigen::Index>(i);
            ndcr_sum += ndcr_loss(zd.col(col), h.col(col));
            dz.col(col) += (config.weights.ndcr / static_cast<double>(B) * ndcr_grad(zd.col(col), h.col(col))).cast<real>();
          }
        }
      }

      if (ce_on) {
        const Mat logits = model.classify(w, z);
        Mat dlogits(logits.rows(), logits.cols());
        for (std::size_t i = 0; i < B; ++i) {
          const auto col = static_cast<Eigen::Index>(i);
          const Eigen::VectorXd l = logits.col(col).cast<double>();
          ce_sum += ce_loss(l, labels[i]);
          dlogits.col(col) = (config.weights.ce / static_cast<double>(B) * ce_grad(l, labels[i])).cast<real>();
        }
        dz += model.classifier_backward(w, z, dlogits, cls_grad);
      }

      const double nb = static_cast<double>(B);
      result.trace.push_back(total_loss(tdcl_sum / nb, ndcr_sum / nb, ce_sum / nb, config.ablation,
                                        config.weights, ce_on));

      RealBuffer enc_grad(w.encoder.size(), real(0));
      model.encoder_backward(w, cache, dz, enc_grad);
      if (config.method == BaselineMethod::kFedProx) {
        const auto mu = static_cast<real>(config.fedprox_mu);
        for (std::size_t i = 0; i < enc_grad.size(); ++i) enc_grad[i] += mu * (w.encoder[i] - global.encoder[i]);
        for (std::size_t i = 0; i < cls_grad.size(); ++i) cls_grad[i] += mu * (w.classifier[i] - global.classifier[i]);
      }
      check_finite(enc_grad, "encoder");
      check_finite(cls_grad, "classifier");
      enc_opt.step(w.encoder, enc_grad);
      cls_opt.step(w.classifier, cls_grad);
    }
  }
  if (!w.all_finite()) throw NumericError("local update produced non-finite parameters");
  return result;
}

ModelParams aggregate(std::span<const ModelParams> params, std::span<const std::size_t> sizes) {
  if (params.empty()) throw ConfigError("aggregate needs at least one client");
  if (params.size() != sizes.size()) throw ShapeError("aggregate: one size per client required");
  const std::size_t N = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (N == 0) throw DataError("aggregate: total sample count is zero");
  for (const auto& p : params) {
    if (!p.same_shape(params[0])) throw ShapeError("aggregate: parameter shapes differ");
  }
  // Accumulate in double over clients sorted by (size, values) so the
  // result does not depend on client order.
  std::vector<std::size_t> order(params.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sizes[a] != sizes[b]) return sizes[a] < sizes[b];
    if (params[a].encoder != params[b].encoder) return params[a].encoder < params[b].encoder;
    return params[a].classifier < params[b].classifier;
  });
  auto combine = [&](auto member) {
    const std::size_t n = (params[0].*member).size();
    RealBuffer out(n);
    for (std::size_t i = 0; i < n; ++i) {
      const real first = (params[0].*member)[i];
      if (std::all_of(params.begin(), params.end(), [&](const ModelParams& p) { return (p.*member)[i] == first; })) {
        out[i] = first;  // exact when every client agrees
        continue;
      }
      double acc = 0.0;
      for (std::size_t k : order) acc += static_cast<double>(sizes[k]) * static_cast<double>((params[k].*member)[i]);
      out[i] = static_cast<real>(acc / static_cast<double>(N));
    }
    return out;
  };
  return ModelParams{combine(&ModelParams::encoder), combine(&ModelParams::classifier)};
}

MatrixXd embed_dataset(const FlModel& model, const ModelParams& params, const LabeledImages& data) {
  constexpr std::size_t kChunk = 256;
  MatrixXd out(model.arch().dim, static_cast<Eigen::Index>(data.size()));
  for (std::size_t begin = 0; begin < data.size(); begin += kChunk) {
    const std::size_t len = std::min(kChunk, data.size() - begin);
    std::vector<const ImageTensor*> ptrs(len);
    for (std::size_t i = 0; i < len; ++i) ptrs[i] = &data.images[begin + i];
    out.middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(len)) =
        model.encode(params, to_feature_map(ptrs)).cast<double>();
  }
  return out;
}

double evaluate_accuracy(const FlModel& model, const ModelParams& params, const LabeledImages& data) {
  if (data.empty()) throw DataError("evaluation set is empty");
  const MatrixXd z = embed_dataset(model, params, data);
  const Mat logits = model.classify(params, z.cast<real>());
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    Eigen::Index best = 0;
    logits.col(i).maxCoeff(&best);
    if (best == data.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

LossBreakdown RoundReport::global_loss() const {
  LossBreakdown g;
  double n = 0.0;
  for (std::size_t k = 0; k < client_losses.size(); ++k) {
    const double w = k < client_sizes.size() ? static_cast<double>(client_sizes[k]) : 1.0;
    g.tdcl += w * client_losses[k].tdcl;
    g.ndcr += w * client_losses[k].ndcr;
    g.ce += w * client_losses[k].ce;
    g.total += w * client_losses[k].total;
    n += w;
  }
  if (n > 0) {
    g.tdcl /= n;
    g.ndcr /= n;
    g.ce /= n;
    g.total /= n;
  }
  return g;
}

namespace {

LossBreakdown mean_trace(const std::vector<LossBreakdown>& trace) {
  LossBreakdown m;
  if (trace.empty()) return m;
  for (const auto& t : trace) {
    m.tdcl += t.tdcl;
    m.ndcr += t.ndcr;
    m.ce += t.ce;
    m.total += t.total;
  }
  const double n = static_cast<double>(trace.size());
  m.tdcl /= n;
  m.ndcr /= n;
  m.ce /= n;
  m.total /= n;
  return m;
}

double probe_accuracy(const FlModel& model, const ModelParams& params, const LabeledImages& train,
                      const LabeledImages& test, std::uint64_t seed) {
  ProbeOptions opts;
  opts.seed = seed;
  return linear_probe(embed_dataset(model, params, train), train.labels,
                      embed_dataset(model, params, test), test.labels, opts);
}

}  // namespace

TrainingResult run_training(const TrainingSetup& setup) {
  if (setup.clients == nullptr || setup.clients->empty()) throw ConfigError("no clients");
  if (setup.test == nullptr || setup.test->empty()) throw ConfigError("no test set");
  if (setup.rounds < 0) throw ConfigError("rounds must be >= 0");
  const bool selfsup = setup.local.mode == TrainingMode::kSelfSupervised;
  if (selfsup && (setup.probe == nullptr || setup.probe->empty())) {
    throw ConfigError("self-supervised evaluation needs a labeled probe split");
  }
  const auto& clients = *setup.clients;
  const FlModel model(setup.arch);
  TrainingResult result;
  result.initial_params = model.init(derive_seed(setup.seed, 0x1417));
  ModelParams global = result.initial_params;
  std::vector<std::size_t> sizes;
  for (const auto& c : clients) sizes.push_back(c.n());

  for (int round = 0; round < setup.rounds; ++round) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<LocalResult> locals(clients.size());
    std::vector<std::exception_ptr> errors(clients.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
      for (std::size_t k = next++; k < clients.size(); k = next++) {
        try {
          Rng rng = make_rng(setup.seed, 0xc11e, k, static_cast<std::uint64_t>(round));
          locals[k] = local_update(model, clients[k], global, setup.frozen, setup.local, rng);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      }
    };
    const int threads = std::clamp(setup.threads, 1, static_cast<int>(clients.size()));
    if (threads == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
    }
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }

    std::vector<ModelParams> updated;
    updated.reserve(clients.size());
    RoundReport report;
    report.round = round;
    report.client_sizes = sizes;
    for (auto& l : locals) {
      report.client_losses.push_back(mean_trace(l.trace));
      updated.push_back(std::move(l.params));
    }
    global = aggregate(updated, sizes);
    report.accuracy = selfsup ? probe_accuracy(model, global, *setup.probe, *setup.test,
                                               derive_seed(setup.seed, 0x9b0e))
                              : evaluate_accuracy(model, global, *setup.test);
    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (setup.on_round) setup.on_round(report);
    result.reports.push_back(std::move(report));
  }
  result.final_params = std::move(global);
  return result;
}

PcaBasis fit_server_basis(const Backbone& backbone, const LabeledImages& data,
                          const std::array<int, 3>& target_dims, double t_frac, std::uint64_t seed) {
  if (data.empty()) throw DataError("server basis needs data");
  Rng rng = make_rng(seed, 0xba5e);
  constexpr std::size_t kMax = 256;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(kMax, idx.size()));
  std::vector<const ImageTensor*> images;
  std::vector<int> ids;
  for (std::size_t i : idx) {
    images.push_back(&data.images[i]);
    ids.push_back(data.labels[i]);
  }
  const Mat conds = Mat::Zero(backbone.net.arch().cond_width, static_cast<Eigen::Index>(images.size()));
  const auto ctaps = conditional_taps(backbone.net, images, conds, ids, backbone.table);
  const int t = denoising_step(t_frac, backbone.schedule.steps());
  const auto dtaps = denoising_taps(backbone.net, images, ids, t, backbone.schedule, backbone.table, rng);
  return fit_pca(concat_tokens(tap_tokens(ctaps), tap_tokens(dtaps)), target_dims);
}

}  // namespace difrc
