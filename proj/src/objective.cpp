#include "difrc/objective.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <numeric>

namespace difrc {

namespace {

constexpr double kMinNorm = 1e-8;

double clamped_norm(const VectorXd& v) {
  const double n = v.norm();
  if (n < kMinNorm) {
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true)) {
      std::cerr << "warning: degenerate embedding with norm " << n << ", clamped to " << kMinNorm << '\n';
    }
    return kMinNorm;
  }
  return n;
}

void check_dims(const VectorXd& a, const VectorXd& b, const char* what) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(what) + ": dimension mismatch " + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()));
  }
}

}  // namespace

double norm_factor(const MatrixXd& batch, const VectorXd& f) {
  if (batch.cols() == 0) throw DataError("norm_factor: empty batch");
  if (batch.rows() != f.size()) throw ShapeError("norm_factor: dimension mismatch");
  double sum = 0.0;
  for (Eigen::Index m = 0; m < batch.cols(); ++m) sum += (batch.col(m) - f).norm();
  return std::max(sum / static_cast<double>(batch.cols()), kMinNormFactor);
}

double similarity(const VectorXd& z, const VectorXd& f, double U) {
  check_dims(z, f, "similarity");
  if (!(U > 0.0)) throw ConfigError("similarity: normalization factor must be positive");
  return z.dot(f) / (U * clamped_norm(z) * clamped_norm(f));
}

VectorXd similarity_grad(const VectorXd& z, const VectorXd& f, double U) {
  check_dims(z, f, "similarity_grad");
  const double nz = clamped_norm(z);
  const double nf = clamped_norm(f);
  const double scale = 1.0 / (U * nz * nf);
  return scale * (f - (z.dot(f) / (nz * nz)) * z);
}

TdclResult tdcl(const VectorXd& z, const VectorXd& f_pos, double u_pos, const MatrixXd& f_negs,
                const std::vector<double>& u_negs, double tau) {
  if (!(tau > 0.0)) throw ConfigError("TDCL temperature must be positive");
  if (static_cast<std::size_t>(f_negs.cols()) != u_negs.size()) {
    throw ShapeError("tdcl: one normalization factor per negative required");
  }
  TdclResult r;
  r.grad = VectorXd::Zero(z.size());
  if (f_negs.cols() == 0) return r;

  const double s_pos = similarity(z, f_pos, u_pos);
  const auto n = f_negs.cols();
  std::vector<double> logits(static_cast<std::size_t>(n) + 1, 0.0);  // logits[0] = 0 for the "1 +"
  for (Eigen::Index j = 0; j < n; ++j) {
    logits[j + 1] = (similarity(z, f_negs.col(j), u_negs[j]) - s_pos) / tau;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (double a : logits) denom += std::exp(a - mx);
  r.loss = mx + std::log(denom);

  const VectorXd g_pos = similarity_grad(z, f_pos, u_pos);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double w = std::exp(logits[j + 1] - mx) / denom;
    r.grad += (w / tau) * (similarity_grad(z, f_negs.col(j), u_negs[j]) - g_pos);
  }
  return r;
}

double tdcl_loss(const VectorXd& z, const VectorXd& f_pos, const MatrixXd& f_negs, double tau,
                 const MatrixXd& batch) {
  const double u_pos = norm_factor(batch, f_pos);
  std::vector<double> u_negs;
  for (Eigen::Index j = 0; j < f_negs.cols(); ++j) u_negs.push_back(norm_factor(batch, f_negs.col(j)));
  return tdcl(z, f_pos, u_pos, f_negs, u_negs, tau).loss;
}

double ndcr_loss(const VectorXd& z, const VectorXd& h) {
  check_dims(z, h, "ndcr_loss");
  return (z - h).squaredNorm();
}

VectorXd ndcr_grad(const VectorXd& z, const VectorXd& h) {
  check_dims(z, h, "ndcr_grad");
  return 2.0 * (z - h);
}

double ce_loss(const VectorXd& logits, int label) {
  if (label < 0 || label >= logits.size()) {
    throw RangeError("ce_loss: label " + std::to_string(label) + " out of range");
  }
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return lse - logits(label);
}

VectorXd ce_grad(const VectorXd& logits, int label) {
  if (label < 0 || label >= logits.size()) throw RangeError("ce_grad: label out of range");
  const double mx = logits.maxCoeff();
  VectorXd p = (logits.array() - mx).exp();
  p /= p.sum();
  p(label) -= 1.0;
  return p;
}

bool uses_tdcl(Ablation a) { return a == Ablation::kFull || a == Ablation::kTdclOnly; }
bool uses_ndcr(Ablation a) { return a == Ablation::kFull || a == Ablation::kNdcrOnly; }

LossBreakdown total_loss(double tdcl_value, double ndcr_value, double ce_value, Ablation ablation,
                         const LossWeights& weights, bool use_ce) {
  if (!std::isfinite(tdcl_value) || !std::isfinite(ndcr_value) || !std::isfinite(ce_value)) {
    throw NumericError("non-finite loss component (tdcl=" + std::to_string(tdcl_value) +
                       ", ndcr=" + std::to_string(ndcr_value) + ", ce=" + std::to_string(ce_value) + ")");
  }
  LossBreakdown out;
  out.tdcl = uses_tdcl(ablation) ? weights.tdcl * tdcl_value : 0.0;
  out.ndcr = uses_ndcr(ablation) ? weights.ndcr * ndcr_value : 0.0;
  out.ce = use_ce ? weights.ce * ce_value : 0.0;
  out.total = out.tdcl + out.ndcr + out.ce;
  return out;
}

PromptSelection select_prompts(TrainingMode mode, std::optional<int> label, int num_classes,
                               int neg_pool_size, Rng& rng, bool pool_includes_base) {
  PromptSelection sel;
  sel.mode = mode;
  if (mode == TrainingMode::kSupervised) {
    if (!label) throw ConfigError("supervised prompt selection requires a label");
    if (*label < 0 || *label >= num_classes) throw RangeError("label out of range");
    sel.positive_id = *label;
    sel.consistency_id = *label;
    for (int j = 0; j < num_classes; ++j) {
      if (j != *label) sel.negative_ids.push_back(j);
    }
    return sel;
  }
  sel.positive_id = num_classes;
  sel.consistency_id = num_classes + 1;
  std::vector<int> pool(static_cast<std::size_t>(num_classes));
  std::iota(pool.begin(), pool.end(), 0);
  if (pool_includes_base) pool.push_back(num_classes + 2);
  if (neg_pool_size < 0 || neg_pool_size > static_cast<int>(pool.size())) {
    throw ConfigError("negative pool size " + std::to_string(neg_pool_size) + " exceeds pool of " +
                      std::to_string(pool.size()));
  }
  // Partial Fisher-Yates: sample without replacement.
  for (int i = 0; i < neg_pool_size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
    sel.negative_ids.push_back(pool[i]);
  }
  return sel;
}

}  // namespace difrc
