#include <doctest.h>

#include <cmath>
#include <functional>

#include "difrc/denoiser.hpp"
#include "difrc/model.hpp"
#include "difrc/objective.hpp"

using namespace difrc;

namespace {

static_assert(std::is_same_v<real, double>, "gradient checks need the double-precision build");

RealBuffer random_direction(std::size_t n, Rng& rng) {
  RealBuffer d(n);
  double norm = 0.0;
  for (auto& v : d) {
    v = standard_normal(rng);
    norm += v * v;
  }
  for (auto& v : d) v /= std::sqrt(norm);
  return d;
}

// Central difference of f along dir at x; x is restored on return.
double directional_fd(RealBuffer& x, const RealBuffer& dir, const std::function<double()>& f,
                      double h = 1e-5) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += h * dir[i];
  const double fp = f();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] -= 2 * h * dir[i];
  const double fm = f();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += h * dir[i];
  return (fp - fm) / (2 * h);
}

double dot(const RealBuffer& a, const RealBuffer& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

bool grad_close(double analytic, double numeric, double tol = 1e-3) {
  return std::abs(analytic - numeric) <= tol * std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

nn::FeatureMap random_images(int batch, int size, Rng& rng) {
  nn::FeatureMap x(1, batch, size, size);
  for (Eigen::Index i = 0; i < x.data.size(); ++i) x.data.data()[i] = 0.5 * standard_normal(rng);
  return x;
}

}  // namespace

TEST_SUITE("gradients") {

TEST_CASE("denoiser parameter and prompt gradients") {
  Rng rng = make_rng(1);
  DenoiserArch arch;
  arch.image_size = 8;
  DenoiserNet net(arch, 3);
  // The output conv starts at zero; perturb everything so every path carries gradient.
  for (auto& v : net.params().values()) v += 0.05 * standard_normal(rng);

  const int B = 3;
  const nn::FeatureMap x = random_images(B, 8, rng);
  const std::vector<int> steps = {1, 17, 60};
  Mat cond(arch.cond_width, B), prompt(arch.cond_width, B);
  for (Eigen::Index i = 0; i < cond.size(); ++i) cond.data()[i] = 0.3 * standard_normal(rng);
  for (Eigen::Index i = 0; i < prompt.size(); ++i) prompt.data()[i] = 0.3 * standard_normal(rng);
  Mat target(1, x.data.cols());
  for (Eigen::Index i = 0; i < target.size(); ++i) target.data()[i] = standard_normal(rng);

  auto loss = [&]() {
    const auto out = net.forward(x, steps, cond, prompt);
    return 0.5 * (out.eps.data - target).squaredNorm();
  };
  DenoiserNet::Cache cache;
  const auto out = net.forward(x, steps, cond, prompt, &cache);
  nn::FeatureMap d_eps = out.eps;
  d_eps.data = out.eps.data - target;
  nn::Grad grad = net.params().zeros();
  const Mat dprompt = net.backward(cache, d_eps, grad);

  for (int trial = 0; trial < 20; ++trial) {
    const RealBuffer dir = random_direction(grad.size(), rng);
    CHECK(grad_close(dot(grad, dir), directional_fd(net.params().values(), dir, loss)));
  }

  // Single coordinates of the prompt input.
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::Index i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(prompt.size()));
    const double keep = prompt.data()[i];
    prompt.data()[i] = keep + 1e-5;
    const double fp = loss();
    prompt.data()[i] = keep - 1e-5;
    const double fm = loss();
    prompt.data()[i] = keep;
    CHECK(grad_close(dprompt.data()[i], (fp - fm) / 2e-5));
  }
}

TEST_CASE("encoder path of the local objective") {
  for (bool pooled : {true, false}) {
    Rng rng = make_rng(pooled ? 2 : 3);
    ModelArch arch;
    arch.image_size = 8;
    arch.dim = 16;
    arch.num_classes = 5;
    arch.global_pool = pooled;
    const FlModel model(arch);
    ModelParams p = model.init(7);
    const int B = 4;
    const nn::FeatureMap x = random_images(B, 8, rng);
    const std::vector<int> labels = {0, 3, 3, 1};
    // Fixed targets standing in for the fused diffusion representations.
    Eigen::MatrixXd fpos(arch.dim, B), h(arch.dim, B), fneg(arch.dim, 3 * B);
    for (Eigen::Index i = 0; i < fpos.size(); ++i) fpos.data()[i] = standard_normal(rng);
    for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = 0.2 * standard_normal(rng);
    for (Eigen::Index i = 0; i < fneg.size(); ++i) fneg.data()[i] = standard_normal(rng);
    const std::vector<double> us = {0.8, 1.1, 1.7};

    auto loss_and_dz = [&](Mat* dz) {
      const Mat z = model.encode(p, x);
      double total = 0.0;
      if (dz) *dz = Mat::Zero(z.rows(), z.cols());
      for (int i = 0; i < B; ++i) {
        const Eigen::VectorXd zi = z.col(i);
        const TdclResult t = tdcl(zi, fpos.col(i), 0.9, fneg.middleCols(3 * i, 3), us, 0.5);
        total += (t.loss + ndcr_loss(zi, h.col(i))) / B;
        if (dz) dz->col(i) += (t.grad + ndcr_grad(zi, h.col(i))) / B;
      }
      return total;
    };
    auto full_loss = [&]() {
      const Mat z = model.encode(p, x);
      const Mat logits = model.classify(p, z);
      double ce = 0.0;
      for (int i = 0; i < B; ++i) ce += ce_loss(logits.col(i), labels[i]) / B;
      return loss_and_dz(nullptr) + ce;
    };

    FlModel::Cache cache;
    const Mat z = model.encode(p, x, &cache);
    Mat dz;
    loss_and_dz(&dz);
    const Mat logits = model.classify(p, z);
    Mat dlogits(logits.rows(), logits.cols());
    for (int i = 0; i < B; ++i) dlogits.col(i) = ce_grad(logits.col(i), labels[i]) / B;
    nn::Grad gc = model.classifier_layout().zeros(), ge = model.encoder_layout().zeros();
    dz += model.classifier_backward(p, z, dlogits, gc);
    model.encoder_backward(p, cache, dz, ge);

    for (int trial = 0; trial < 20; ++trial) {
      const RealBuffer de = random_direction(ge.size(), rng);
      CHECK(grad_close(dot(ge, de), directional_fd(p.encoder, de, full_loss)));
      const RealBuffer dc = random_direction(gc.size(), rng);
      CHECK(grad_close(dot(gc, dc), directional_fd(p.classifier, dc, full_loss)));
    }
  }
}

TEST_CASE("layer primitives") {
  Rng rng = make_rng(4);
  nn::FeatureMap x(3, 2, 4, 4);
  for (Eigen::Index i = 0; i < x.data.size(); ++i) x.data.data()[i] = standard_normal(rng);

  auto check_map = [&](const std::function<Mat(const nn::FeatureMap&)>& f,
                       const std::function<Mat(const Mat&)>& back) {
    const Mat y = f(x);
    Mat w(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = standard_normal(rng);
    const Mat dx = back(w);
    for (int trial = 0; trial < 10; ++trial) {
      const Eigen::Index i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(x.data.size()));
      const double keep = x.data.data()[i];
      x.data.data()[i] = keep + 1e-6;
      const double fp = f(x).cwiseProduct(w).sum();
      x.data.data()[i] = keep - 1e-6;
      const double fm = f(x).cwiseProduct(w).sum();
      x.data.data()[i] = keep;
      CHECK(grad_close(dx.data()[i], (fp - fm) / 2e-6, 1e-6));
    }
  };

  check_map([](const nn::FeatureMap& m) { return nn::avg_pool2(m).data; },
            [&](const Mat& w) {
              nn::FeatureMap dy(3, 2, 2, 2);
              dy.data = w;
              return nn::avg_pool2_backward(dy).data;
            });
  check_map([](const nn::FeatureMap& m) { return nn::upsample2(m).data; },
            [&](const Mat& w) {
              nn::FeatureMap dy(3, 2, 8, 8);
              dy.data = w;
              return nn::upsample2_backward(dy).data;
            });
  check_map([](const nn::FeatureMap& m) { return nn::global_avg_pool(m); },
            [&](const Mat& w) { return nn::global_avg_pool_backward(w, 4, 4).data; });
  check_map([](const nn::FeatureMap& m) { return nn::silu(m.data); },
            [&](const Mat& w) { return nn::silu_backward(x.data, w); });
}

}  // TEST_SUITE
