#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "difrc/denoiser.hpp"

namespace difrc {

/// PCA of one tapped layer's per-pixel channel vectors.
struct PcaLayer {
  Eigen::VectorXd mean;         // channels
  Eigen::MatrixXd components;   // target_dim x channels, orthonormal rows
  Eigen::VectorXd eigenvalues;  // all channels, descending (population covariance)

  int target_dim() const { return static_cast<int>(components.rows()); }
  int channels() const { return static_cast<int>(mean.size()); }
  Eigen::MatrixXd project(const Eigen::MatrixXd& tokens) const;      // channels x N -> k x N
  Eigen::MatrixXd reconstruct(const Eigen::MatrixXd& coords) const;  // k x N -> channels x N
};

/// Fits one layer: mean and top-k eigenvectors of the covariance of the
/// columns of `tokens` (channels x N). Sign convention: the first nonzero
/// entry of every component is positive.
PcaLayer fit_pca_layer(const Eigen::MatrixXd& tokens, int target_dim);

/// PCA bases for decoder layers 2, 3 and 4 (layer 1 is not fused).
struct PcaBasis {
  std::array<PcaLayer, 3> layers;

  int dim() const;
  /// Index range [begin, end) of layer L (2..4) in the fused vector.
  std::pair<int, int> segment(int layer) const;
};

/// Per-layer target dims (d/2, d/4, d/4).
std::array<int, 3> default_target_dims(int d);

/// tap_tokens[i]: channels x N tokens of decoder layer i + 2.
PcaBasis fit_pca(const std::array<Eigen::MatrixXd, 3>& tap_tokens, const std::array<int, 3>& target_dims);

/// Collects the per-pixel channel vectors of layers 2..4 from batched taps.
/// Layer 2 is upsampled (nearest) to layer 3's resolution first.
std::array<Eigen::MatrixXd, 3> tap_tokens(const std::array<nn::FeatureMap, 4>& taps);

/// Fuses batched taps into d x B vectors: per layer, project every pixel's
/// channel vector and average over pixels, then concatenate layers 2, 3, 4.
Eigen::MatrixXd fuse(const std::array<nn::FeatureMap, 4>& taps, const PcaBasis& basis);

enum class RepresentationKind { kConditional, kDenoising };

struct FusedRepresentation {
  Eigen::VectorXd vector;
  RepresentationKind kind = RepresentationKind::kConditional;
  int source_id = 0;
  int t_used = 0;
};

/// Conditional representation: clean image at t = 0 with condition and prompt.
FusedRepresentation extract_conditional(const DenoiserNet& net, const ImageTensor& x,
                                        std::span<const double> cond, int prompt_id,
                                        const PromptTable& table, const PcaBasis& basis);

/// Denoising representation: image noised to step t, prompt only, no condition.
FusedRepresentation extract_denoising(const DenoiserNet& net, const ImageTensor& x, int prompt_id,
                                      int t, const NoiseSchedule& schedule,
                                      const PromptTable& table, const PcaBasis& basis, Rng& rng);

/// Default denoising step for a schedule: round(t_frac * T), at least 1.
int denoising_step(double t_frac, int T);

/// Batched tap computation for conditional extraction: images[b] with
/// cond column b and prompt ids[b] at t = 0.
std::array<nn::FeatureMap, 4> conditional_taps(const DenoiserNet& net,
                                               std::span<const ImageTensor* const> images,
                                               const Mat& conds, std::span<const int> prompt_ids,
                                               const PromptTable& table);

/// Batched taps for denoising extraction; noise is drawn from rng in sample order.
std::array<nn::FeatureMap, 4> denoising_taps(const DenoiserNet& net,
                                             std::span<const ImageTensor* const> images,
                                             std::span<const int> prompt_ids, int t,
                                             const NoiseSchedule& schedule,
                                             const PromptTable& table, Rng& rng);

/// Representation dump: header line `DIFRC-REP v1 d=<d> kind=<kind>` then per
/// sample a little-endian uint32 class id and d little-endian float32 values.
void write_representation_dump(const std::filesystem::path& path, RepresentationKind kind,
                               std::span<const int> ids, const Eigen::MatrixXd& vectors);

struct RepresentationDump {
  RepresentationKind kind = RepresentationKind::kConditional;
  int dim = 0;
  std::vector<int> ids;
  Eigen::MatrixXd vectors;  // d x n
};

RepresentationDump read_representation_dump(const std::filesystem::path& path);

}  // namespace difrc
