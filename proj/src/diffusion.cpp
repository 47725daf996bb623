#include "difrc/diffusion.hpp"

#include <cmath>
#include <string>

namespace difrc {

NoiseSchedule::NoiseSchedule(std::vector<double> gamma) : gamma_(std::move(gamma)) {
  if (gamma_.empty()) throw ConfigError("noise schedule needs at least one step");
  alpha_.reserve(gamma_.size());
  alpha_bar_.reserve(gamma_.size());
  double running = 1.0;
  for (double g : gamma_) {
    if (!(g > 0.0 && g < 1.0)) throw ConfigError("noise schedule variance must lie in (0, 1)");
    alpha_.push_back(1.0 - g);
    running *= 1.0 - g;
    alpha_bar_.push_back(running);
  }
}

void NoiseSchedule::check_step(int t, int lo) const {
  if (t < lo || t > steps()) {
    throw RangeError("diffusion step " + std::to_string(t) + " outside [" + std::to_string(lo) +
                     ", " + std::to_string(steps()) + "]");
  }
}

double NoiseSchedule::gamma(int t) const {
  check_step(t, 1);
  return gamma_[t - 1];
}

double NoiseSchedule::alpha(int t) const {
  check_step(t, 1);
  return alpha_[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
  check_step(t, 0);
  return t == 0 ? 1.0 : alpha_bar_[t - 1];
}

NoiseSchedule build_schedule(int steps, ScheduleKind kind, double gamma_min, double gamma_max) {
  if (steps < 1) throw ConfigError("schedule needs T >= 1");
  if (!(gamma_min > 0.0 && gamma_min <= gamma_max && gamma_max < 1.0)) {
    throw ConfigError("schedule bounds must satisfy 0 < gamma_min <= gamma_max < 1");
  }
  std::vector<double> gamma(steps);
  for (int i = 0; i < steps; ++i) {
    if (kind == ScheduleKind::kConstant || steps == 1) {
      gamma[i] = gamma_min;
    } else {
      gamma[i] = gamma_min + (gamma_max - gamma_min) * static_cast<double>(i) / (steps - 1);
    }
  }
  return NoiseSchedule(std::move(gamma));
}

ImageTensor forward_noise_with(const ImageTensor& x0, int t, const NoiseSchedule& schedule,
                               const ImageTensor& eps) {
  if (!x0.same_shape(eps)) throw ShapeError("forward_noise: eps shape differs from image");
  const double ab = schedule.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double s = std::sqrt(1.0 - ab);
  ImageTensor out = x0;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * x0.data[i] + s * eps.data[i];
  return out;
}

NoisedImage forward_noise(const ImageTensor& x0, int t, const NoiseSchedule& schedule, Rng& rng) {
  schedule.alpha_bar(t);  // range check before consuming randomness
  NoisedImage out;
  out.eps = ImageTensor(x0.channels, x0.height, x0.width);
  for (double& e : out.eps.data) e = standard_normal(rng);
  out.x_t = forward_noise_with(x0, t, schedule, out.eps);
  return out;
}

ImageTensor forward_step(const ImageTensor& x_prev, int t, const NoiseSchedule& schedule, Rng& rng) {
  const double g = schedule.gamma(t);
  const double keep = std::sqrt(1.0 - g);
  const double add = std::sqrt(g);
  ImageTensor out = x_prev;
  for (double& v : out.data) v = keep * v + add * standard_normal(rng);
  return out;
}

ImageTensor reverse_step(const EpsPredictor& predict, const ImageTensor& x_t, int t,
                         const NoiseSchedule& schedule) {
  const double alpha = schedule.alpha(t);
  const double ab = schedule.alpha_bar(t);
  const ImageTensor eps = predict(x_t, t);
  if (!eps.same_shape(x_t)) throw ShapeError("reverse_step: predicted noise has wrong shape");
  const double coef = (1.0 - alpha) / std::sqrt(1.0 - ab);
  const double scale = 1.0 / std::sqrt(alpha);
  ImageTensor out = x_t;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = scale * (x_t.data[i] - coef * eps.data[i]);
  }
  return out;
}

}  // namespace difrc
