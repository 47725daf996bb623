#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "difrc/data.hpp"
#include "difrc/diffusion.hpp"
#include "difrc/nn.hpp"
#include "difrc/prompt.hpp"

namespace difrc {

/// Channel and size layout of the tiny conditional UNet. The four decoder
/// taps default to spatial sizes {4, 8, 16, 16} and channels {64, 64, 32, 16}.
struct DenoiserArch {
  int image_channels = 1;
  int image_size = 16;
  int top_channels = 16;   // encoder level at full resolution
  int down_channels = 32;  // encoder level at half resolution
  std::array<int, 4> tap_channels{64, 64, 32, 16};
  int time_dim = 32;
  int emb_dim = 64;
  int cond_width = 64;  // width of both the condition vector and prompt features
};

struct TapShape {
  int channels = 0;
  int size = 0;  // square spatial size
};

/// Noise-prediction UNet with timestep, condition and prompt inputs summed
/// into one embedding injected as a channel bias into every block.
class DenoiserNet {
 public:
  struct Output {
    nn::FeatureMap eps;
    std::array<nn::FeatureMap, 4> taps;
  };

  /// Activations kept for the backward pass.
  struct Cache {
    std::vector<int> steps;
    Mat time_in, time_hidden_pre, emb_pre, emb;
    nn::FeatureMap x;
    std::array<nn::FeatureMap, 7> block_in;   // conv inputs
    std::array<nn::FeatureMap, 7> block_pre;  // pre-activations
    std::array<nn::FeatureMap, 7> block_out;
    Mat cond, prompt;
  };

  DenoiserNet() = default;
  DenoiserNet(const DenoiserArch& arch, std::uint64_t seed);

  const DenoiserArch& arch() const { return arch_; }
  std::array<TapShape, 4> tap_shapes() const;

  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }

  /// Batched forward. x: image_channels x B*size*size; steps: one per sample;
  /// cond and prompt: cond_width x B. Pure in (params, inputs).
  Output forward(const nn::FeatureMap& x, std::span<const int> steps, const Mat& cond,
                 const Mat& prompt, Cache* cache = nullptr) const;

  /// Accumulates parameter gradients and returns dL/dprompt (cond_width x B).
  Mat backward(const Cache& cache, const nn::FeatureMap& d_eps, nn::Grad& grad) const;

 private:
  void build(std::uint64_t seed);

  DenoiserArch arch_;
  nn::ParamStore store_;
  nn::Linear time1_, time2_, cond_proj_, prompt_proj_;
  std::array<nn::Conv2d, 7> convs_;
  std::array<nn::Linear, 7> injects_;
  nn::Conv2d out_conv_;
};

/// Stacks images into a (channels x B*H*W) feature map.
nn::FeatureMap to_feature_map(std::span<const ImageTensor* const> images);
nn::FeatureMap to_feature_map(const ImageTensor& image);
ImageTensor to_image(const nn::FeatureMap& map, int sample);

struct DenoiserResult {
  ImageTensor eps_pred;
  std::array<nn::FeatureMap, 4> taps;
};

/// Single-image forward. `cond` may be empty (no condition: zero vector).
DenoiserResult denoiser_forward(const DenoiserNet& net, const ImageTensor& x_t, int t,
                                std::span<const real> cond, const Vec& prompt);

/// Reverse step using the network as the noise predictor, conditioned on a prompt.
ImageTensor reverse_step(const DenoiserNet& net, const ImageTensor& x_t, int t,
                         const NoiseSchedule& schedule, const Vec& prompt);

struct DenoiserTrainOptions {
  int steps = 2000;
  int batch = 32;
  double lr = 0.01;
  double momentum = 0.9;
  /// Probability of replacing the class prompt with a reserved generic row.
  double generic_prob = 0.15;
};

/// Per-element mean squared noise-prediction error for a fixed set of
/// (clean image, step, eps, prompt) tuples; each image is noised to its step
/// with its eps before prediction.
double denoiser_loss(const DenoiserNet& net, const PromptTable& table, const NoiseSchedule& schedule,
                     std::span<const ImageTensor* const> images, std::span<const int> steps,
                     std::span<const ImageTensor> eps, std::span<const int> prompt_ids);

/// Trains net and prompt table on E||eps_theta(x_t, t, prompt) - eps||^2 with t
/// uniform in [1, T]. Returns one loss value (per-element MSE) per step.
std::vector<double> train_denoiser(DenoiserNet& net, PromptTable& table, const LabeledImages& data,
                                   const NoiseSchedule& schedule,
                                   const DenoiserTrainOptions& options, Rng& rng);

struct ScheduleConfig {
  int steps = 100;
  ScheduleKind kind = ScheduleKind::kLinear;
  double gamma_min = 1e-3;
  double gamma_max = 0.2;

  NoiseSchedule build() const { return build_schedule(steps, kind, gamma_min, gamma_max); }
};

/// The frozen diffusion side of a run.
struct Backbone {
  DenoiserNet net;
  PromptTable table;
  ScheduleConfig schedule_config;
  NoiseSchedule schedule;
};

}  // namespace difrc
