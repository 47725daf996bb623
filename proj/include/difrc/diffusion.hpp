#pragma once

#include <functional>
#include <span>
#include <vector>

#include "difrc/common.hpp"

namespace difrc {

/// A single image, channel-major, values normalized to [-1, 1] for training.
struct ImageTensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  ImageTensor() = default;
  ImageTensor(int c, int h, int w) : channels(c), height(h), width(w), data(std::size_t(c) * h * w, 0.0) {}

  std::size_t size() const { return data.size(); }
  bool same_shape(const ImageTensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  double& at(int c, int y, int x) { return data[(std::size_t(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return data[(std::size_t(c) * height + y) * width + x]; }
};

enum class ScheduleKind { kLinear, kConstant };

/// Variance schedule with 1-based step indexing: gamma(t), alpha(t) and
/// alpha_bar(t) for t in [1, T], and alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  explicit NoiseSchedule(std::vector<double> gamma);

  int steps() const { return static_cast<int>(gamma_.size()); }
  double gamma(int t) const;
  double alpha(int t) const;
  double alpha_bar(int t) const;

  const std::vector<double>& gammas() const { return gamma_; }
  const std::vector<double>& alphas() const { return alpha_; }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }

 private:
  void check_step(int t, int lo) const;

  std::vector<double> gamma_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
};

NoiseSchedule build_schedule(int steps, ScheduleKind kind, double gamma_min, double gamma_max);

struct NoisedImage {
  ImageTensor x_t;
  ImageTensor eps;
};

/// Closed-form forward noising x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
NoisedImage forward_noise(const ImageTensor& x0, int t, const NoiseSchedule& schedule, Rng& rng);

/// Same as forward_noise with a caller-supplied eps.
ImageTensor forward_noise_with(const ImageTensor& x0, int t, const NoiseSchedule& schedule,
                               const ImageTensor& eps);

/// One application of the single-step chain x_t = sqrt(1 - gamma_t) x_{t-1} + sqrt(gamma_t) eps.
ImageTensor forward_step(const ImageTensor& x_prev, int t, const NoiseSchedule& schedule, Rng& rng);

using EpsPredictor = std::function<ImageTensor(const ImageTensor& x_t, int t)>;

/// Deterministic reverse step
/// x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t).
ImageTensor reverse_step(const EpsPredictor& predict, const ImageTensor& x_t, int t,
                         const NoiseSchedule& schedule);

}  // namespace difrc
