#pragma once

#include <optional>
#include <vector>

#include "difrc/common.hpp"

namespace difrc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Floor applied to the similarity normalization factor.
inline constexpr double kMinNormFactor = 1e-8;

/// Mean L2 distance from the embeddings (columns of `batch`) to `f`,
/// clamped below at 1e-8.
double norm_factor(const MatrixXd& batch, const VectorXd& f);

/// s = (z . f) / (U |z| |f|). Zero-norm inputs are clamped to 1e-8 with a warning.
double similarity(const VectorXd& z, const VectorXd& f, double U);
/// ds/dz with U and f held constant.
VectorXd similarity_grad(const VectorXd& z, const VectorXd& f, double U);

struct TdclResult {
  double loss = 0.0;
  VectorXd grad;  // dL/dz
};

/// log(1 + sum_j exp(s_j / tau) / exp(s_pos / tau)) with explicit per-target
/// normalization factors; evaluated as a log-sum-exp.
TdclResult tdcl(const VectorXd& z, const VectorXd& f_pos, double u_pos, const MatrixXd& f_negs,
                const std::vector<double>& u_negs, double tau);

/// TDCL with U computed from `batch` for each target.
double tdcl_loss(const VectorXd& z, const VectorXd& f_pos, const MatrixXd& f_negs, double tau,
                 const MatrixXd& batch);

/// sum_q (z_q - h_q)^2.
double ndcr_loss(const VectorXd& z, const VectorXd& h);
VectorXd ndcr_grad(const VectorXd& z, const VectorXd& h);

/// -log softmax(logits)[label] with max-shift.
double ce_loss(const VectorXd& logits, int label);
/// softmax(logits) - onehot(label).
VectorXd ce_grad(const VectorXd& logits, int label);

enum class Ablation { kFull, kTdclOnly, kNdcrOnly, kBaseline };

bool uses_tdcl(Ablation a);
bool uses_ndcr(Ablation a);

struct LossBreakdown {
  double tdcl = 0.0;
  double ndcr = 0.0;
  double ce = 0.0;
  double total = 0.0;
};

/// Optional per-term weights; the method itself uses 1, 1, 1.
struct LossWeights {
  double tdcl = 1.0;
  double ndcr = 1.0;
  double ce = 1.0;
};

/// Sums the enabled, weighted terms; disabled terms are recorded as 0. Throws
/// NumericError if any component is NaN/Inf.
LossBreakdown total_loss(double tdcl, double ndcr, double ce, Ablation ablation,
                         const LossWeights& weights = {}, bool use_ce = true);

enum class TrainingMode { kSupervised, kSelfSupervised };

struct PromptSelection {
  int positive_id = 0;
  std::vector<int> negative_ids;
  int consistency_id = 0;
  TrainingMode mode = TrainingMode::kSupervised;
};

/// Prompt ids follow the PromptTable layout: classes 0..C-1, then
/// C = generic positive, C+1 = generic object, C+2 = negative-pool base.
/// The self-supervised negative pool is the class rows, plus the base row
/// when `pool_includes_base` is set.
PromptSelection select_prompts(TrainingMode mode, std::optional<int> label, int num_classes,
                               int neg_pool_size, Rng& rng, bool pool_includes_base = false);

}  // namespace difrc
