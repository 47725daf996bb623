#include "difrc/denoiser.hpp"

#include <algorithm>
#include <cmath>

namespace difrc {

namespace {

// Block order: 0 top, 1 down, 2 bottom, 3 mid (tap 1), 4 up1 (tap 2),
// 5 up2 (tap 3), 6 head (tap 4).
constexpr int kTapBlock[4] = {3, 4, 5, 6};

Mat timestep_embedding(std::span<const int> steps, int dim) {
  const int half = dim / 2;
  Mat e = Mat::Zero(dim, static_cast<Eigen::Index>(steps.size()));
  for (std::size_t b = 0; b < steps.size(); ++b) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = steps[b] * freq;
      e(i, static_cast<Eigen::Index>(b)) = static_cast<real>(std::sin(arg));
      e(half + i, static_cast<Eigen::Index>(b)) = static_cast<real>(std::cos(arg));
    }
  }
  return e;
}

}  // namespace

DenoiserNet::DenoiserNet(const DenoiserArch& arch, std::uint64_t seed) : arch_(arch) {
  if (arch.image_size % 4 != 0 || arch.image_size < 8) {
    throw ConfigError("denoiser image size must be a multiple of 4 and at least 8");
  }
  const auto& tc = arch.tap_channels;
  for (int i = 0; i < 3; ++i) {
    if (tc[i] < tc[i + 1]) throw ConfigError("tap channels must be non-increasing");
  }
  build(seed);
}

void DenoiserNet::build(std::uint64_t seed) {
  Rng rng(seed);
  const auto& a = arch_;
  const auto& tc = a.tap_channels;
  time1_ = nn::Linear::create(store_, "time.fc1", a.time_dim, a.emb_dim, rng);
  time2_ = nn::Linear::create(store_, "time.fc2", a.emb_dim, a.emb_dim, rng);
  cond_proj_ = nn::Linear::create(store_, "cond.proj", a.cond_width, a.emb_dim, rng);
  prompt_proj_ = nn::Linear::create(store_, "prompt.proj", a.cond_width, a.emb_dim, rng);

  struct Spec {
    const char* name;
    int in, out, kernel;
  };
  const Spec specs[7] = {
      {"enc.top", a.image_channels, a.top_channels, 3},
      {"enc.down", a.top_channels, a.down_channels, 3},
      {"enc.bottom", a.down_channels, tc[0], 3},
      {"mid", tc[0], tc[0], 3},
      {"dec.up1", tc[0] + a.down_channels, tc[1], 3},
      {"dec.up2", tc[1] + a.top_channels, tc[2], 1},
      {"dec.head", tc[2], tc[3], 3},
  };
  for (int i = 0; i < 7; ++i) {
    convs_[i] = nn::Conv2d::create(store_, specs[i].name, specs[i].in, specs[i].out,
                                   specs[i].kernel, rng);
    injects_[i] = nn::Linear::create(store_, std::string(specs[i].name) + ".emb", a.emb_dim,
                                     specs[i].out, rng, 0.5);
  }
  // Zero-initialized output: the untrained net predicts eps = 0.
  out_conv_ = nn::Conv2d::create(store_, "out", tc[3], a.image_channels, 3, rng, 0.0);
}

std::array<TapShape, 4> DenoiserNet::tap_shapes() const {
  const int s = arch_.image_size;
  const auto& tc = arch_.tap_channels;
  return {TapShape{tc[0], s / 4}, TapShape{tc[1], s / 2}, TapShape{tc[2], s},
          TapShape{tc[3], s}};
}

DenoiserNet::Output DenoiserNet::forward(const nn::FeatureMap& x, std::span<const int> steps,
                                         const Mat& cond, const Mat& prompt, Cache* cache) const {
  const int batch = x.batch;
  if (x.channels() != arch_.image_channels || x.height != arch_.image_size ||
      x.width != arch_.image_size) {
    throw ShapeError("denoiser input shape does not match architecture");
  }
  if (static_cast<int>(steps.size()) != batch || cond.cols() != batch || prompt.cols() != batch) {
    throw ShapeError("denoiser: steps/cond/prompt batch size mismatch");
  }
  if (cond.rows() != arch_.cond_width || prompt.rows() != arch_.cond_width) {
    throw ShapeError("denoiser: condition and prompt width must equal cond_width (" +
                     std::to_string(arch_.cond_width) + ")");
  }
  const auto& p = store_;
  Mat time_in = timestep_embedding(steps, arch_.time_dim);
  Mat hidden_pre = time1_.forward(p, time_in);
  Mat emb_pre = time2_.forward(p, nn::silu(hidden_pre));
  emb_pre += cond_proj_.forward(p, cond);
  emb_pre += prompt_proj_.forward(p, prompt);
  Mat emb = nn::silu(emb_pre);

  std::array<nn::FeatureMap, 7> in, pre, out;
  auto block = [&](int i, nn::FeatureMap input) {
    pre[i] = convs_[i].forward(p, input);
    nn::add_channel_bias(pre[i], injects_[i].forward(p, emb));
    out[i].data = nn::silu(pre[i].data);
    out[i].batch = pre[i].batch;
    out[i].height = pre[i].height;
    out[i].width = pre[i].width;
    in[i] = std::move(input);
  };
  block(0, x);
  block(1, nn::avg_pool2(out[0]));
  block(2, nn::avg_pool2(out[1]));
  block(3, out[2]);
  block(4, nn::concat_channels(nn::upsample2(out[3]), out[1]));
  block(5, nn::concat_channels(nn::upsample2(out[4]), out[0]));
  block(6, out[5]);

  Output result;
  result.eps = out_conv_.forward(p, out[6]);
  for (int i = 0; i < 4; ++i) result.taps[i] = out[kTapBlock[i]];

  if (cache != nullptr) {
    cache->steps.assign(steps.begin(), steps.end());
    cache->time_in = std::move(time_in);
    cache->time_hidden_pre = std::move(hidden_pre);
    cache->emb_pre = std::move(emb_pre);
    cache->emb = std::move(emb);
    cache->x = x;
    cache->block_in = std::move(in);
    cache->block_pre = std::move(pre);
    cache->block_out = std::move(out);
    cache->cond = cond;
    cache->prompt = prompt;
  }
  return result;
}

Mat DenoiserNet::backward(const Cache& c, const nn::FeatureMap& d_eps, nn::Grad& grad) const {
  const auto& p = store_;
  if (grad.size() != p.size()) throw ShapeError("denoiser gradient buffer has wrong size");
  std::array<nn::FeatureMap, 7> d_out;
  for (int i = 0; i < 7; ++i) {
    d_out[i] = nn::FeatureMap(c.block_out[i].channels(), c.block_out[i].batch,
                              c.block_out[i].height, c.block_out[i].width);
  }
  d_out[6].data += out_conv_.backward(p, c.block_out[6], d_eps, grad).data;

  Mat d_emb = Mat::Zero(c.emb.rows(), c.emb.cols());
  auto split = [](const nn::FeatureMap& m, int top) {
    nn::FeatureMap a(top, m.batch, m.height, m.width), b(m.channels() - top, m.batch, m.height, m.width);
    a.data = m.data.topRows(top);
    b.data = m.data.bottomRows(m.channels() - top);
    return std::pair{a, b};
  };
  // Returns dL/d(block input).
  auto block_back = [&](int i) {
    nn::FeatureMap d_pre = d_out[i];
    d_pre.data = nn::silu_backward(c.block_pre[i].data, d_out[i].data);
    d_emb += injects_[i].backward(p, c.emb, nn::channel_bias_backward(d_pre), grad);
    return convs_[i].backward(p, c.block_in[i], d_pre, grad);
  };

  d_out[5].data += block_back(6).data;
  {
    auto [d_up, d_skip] = split(block_back(5), arch_.tap_channels[1]);
    d_out[4].data += nn::upsample2_backward(d_up).data;
    d_out[0].data += d_skip.data;
  }
  {
    auto [d_up, d_skip] = split(block_back(4), arch_.tap_channels[0]);
    d_out[3].data += nn::upsample2_backward(d_up).data;
    d_out[1].data += d_skip.data;
  }
  d_out[2].data += block_back(3).data;
  d_out[1].data += nn::avg_pool2_backward(block_back(2)).data;
  d_out[0].data += nn::avg_pool2_backward(block_back(1)).data;
  block_back(0);

  const Mat d_emb_pre = nn::silu_backward(c.emb_pre, d_emb);
  cond_proj_.backward(p, c.cond, d_emb_pre, grad);
  Mat d_prompt = prompt_proj_.backward(p, c.prompt, d_emb_pre, grad);
  const Mat d_hidden = time2_.backward(p, nn::silu(c.time_hidden_pre), d_emb_pre, grad);
  time1_.backward(p, c.time_in, nn::silu_backward(c.time_hidden_pre, d_hidden), grad);
  return d_prompt;
}

nn::FeatureMap to_feature_map(std::span<const ImageTensor* const> images) {
  if (images.empty()) throw DataError("to_feature_map: no images");
  const ImageTensor& first = *images.front();
  nn::FeatureMap m(first.channels, static_cast<int>(images.size()), first.height, first.width);
  const int hw = first.height * first.width;
  for (std::size_t b = 0; b < images.size(); ++b) {
    const ImageTensor& img = *images[b];
    if (!img.same_shape(first)) throw ShapeError("to_feature_map: mixed image shapes");
    for (int c = 0; c < img.channels; ++c) {
      for (int i = 0; i < hw; ++i) {
        m.data(c, static_cast<Eigen::Index>(b) * hw + i) =
            static_cast<real>(img.data[static_cast<std::size_t>(c) * hw + i]);
      }
    }
  }
  return m;
}

nn::FeatureMap to_feature_map(const ImageTensor& image) {
  const ImageTensor* ptr = &image;
  return to_feature_map(std::span<const ImageTensor* const>(&ptr, 1));
}

ImageTensor to_image(const nn::FeatureMap& map, int sample) {
  ImageTensor img(map.channels(), map.height, map.width);
  const int hw = map.tokens();
  for (int c = 0; c < img.channels; ++c) {
    for (int i = 0; i < hw; ++i) {
      img.data[static_cast<std::size_t>(c) * hw + i] =
          static_cast<double>(map.data(c, static_cast<Eigen::Index>(sample) * hw + i));
    }
  }
  return img;
}

DenoiserResult denoiser_forward(const DenoiserNet& net, const ImageTensor& x_t, int t,
                                std::span<const real> cond, const Vec& prompt) {
  const int width = net.arch().cond_width;
  Mat c = Mat::Zero(width, 1);
  if (!cond.empty()) {
    if (static_cast<int>(cond.size()) != width) throw ShapeError("condition width mismatch");
    for (int i = 0; i < width; ++i) c(i, 0) = cond[i];
  }
  if (prompt.size() != width) throw ShapeError("prompt width does not match cond_width");
  const int steps[1] = {t};
  auto out = net.forward(to_feature_map(x_t), steps, c, Mat(prompt));
  return DenoiserResult{to_image(out.eps, 0), std::move(out.taps)};
}

ImageTensor reverse_step(const DenoiserNet& net, const ImageTensor& x_t, int t,
                         const NoiseSchedule& schedule, const Vec& prompt) {
  if (t < 1) throw RangeError("reverse step needs t >= 1");
  EpsPredictor predict = [&](const ImageTensor& x, int step) {
    return denoiser_forward(net, x, step, {}, prompt).eps_pred;
  };
  return reverse_step(predict, x_t, t, schedule);
}

double denoiser_loss(const DenoiserNet& net, const PromptTable& table, const NoiseSchedule& schedule,
                     std::span<const ImageTensor* const> images, std::span<const int> steps,
                     std::span<const ImageTensor> eps, std::span<const int> prompt_ids) {
  if (images.size() != steps.size() || images.size() != eps.size() || images.size() != prompt_ids.size()) {
    throw ShapeError("denoiser_loss: tuple lengths differ");
  }
  std::vector<ImageTensor> noisy;
  std::vector<const ImageTensor*> noisy_ptrs;
  noisy.reserve(images.size());
  for (std::size_t b = 0; b < images.size(); ++b) {
    noisy.push_back(forward_noise_with(*images[b], steps[b], schedule, eps[b]));
    noisy_ptrs.push_back(&noisy.back());
  }
  const nn::FeatureMap x = to_feature_map(noisy_ptrs);
  Mat target(x.data.rows(), x.data.cols());
  const int hw = x.tokens();
  for (std::size_t b = 0; b < eps.size(); ++b) {
    for (int c = 0; c < x.channels(); ++c) {
      for (int i = 0; i < hw; ++i) {
        target(c, static_cast<Eigen::Index>(b) * hw + i) =
            static_cast<real>(eps[b].data[static_cast<std::size_t>(c) * hw + i]);
      }
    }
  }
  const Mat cond = Mat::Zero(net.arch().cond_width, x.batch);
  const auto out = net.forward(x, steps, cond, table.gather(prompt_ids));
  return (out.eps.data - target).template cast<double>().squaredNorm() /
         static_cast<double>(target.size());
}

std::vector<double> train_denoiser(DenoiserNet& net, PromptTable& table, const LabeledImages& data,
                                   const NoiseSchedule& schedule,
                                   const DenoiserTrainOptions& options, Rng& rng) {
  if (data.empty()) throw DataError("train_denoiser: empty dataset");
  if (options.steps < 0 || options.batch < 1) throw ConfigError("train_denoiser: steps must be >= 0 and batch >= 1");
  if (table.width() != net.arch().cond_width) throw ShapeError("prompt table width != cond_width");

  nn::Sgd net_opt(options.lr, options.momentum, 0.0);
  nn::Sgd table_opt(options.lr, options.momentum, 0.0);
  std::vector<double> trace;
  trace.reserve(options.steps);
  const int batch = options.batch;
  const int T = schedule.steps();
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::uniform_int_distribution<int> pick_t(1, T);
  std::uniform_int_distribution<int> pick_reserved(0, 2);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  std::vector<const ImageTensor*> noisy_ptrs(batch), eps_ptrs(batch);
  std::vector<ImageTensor> noisy(batch), eps(batch);
  std::vector<int> steps(batch), ids(batch);
  for (int step = 0; step < options.steps; ++step) {
    for (int b = 0; b < batch; ++b) {
      const std::size_t idx = pick(rng);
      steps[b] = pick_t(rng);
      ids[b] = data.labels[idx];
      if (coin(rng) < options.generic_prob) ids[b] = table.num_classes() + pick_reserved(rng);
      auto noised = forward_noise(data.images[idx], steps[b], schedule, rng);
      noisy[b] = std::move(noised.x_t);
      eps[b] = std::move(noised.eps);
      noisy_ptrs[b] = &noisy[b];
      eps_ptrs[b] = &eps[b];
    }
    const nn::FeatureMap x = to_feature_map(noisy_ptrs);
    const nn::FeatureMap target = to_feature_map(eps_ptrs);
    const Mat cond = Mat::Zero(net.arch().cond_width, batch);
    DenoiserNet::Cache cache;
    const auto out = net.forward(x, steps, cond, table.gather(ids), &cache);
    nn::FeatureMap d_eps = out.eps;
    d_eps.data = out.eps.data - target.data;
    const double loss = d_eps.data.template cast<double>().squaredNorm() / static_cast<double>(d_eps.data.size());
    if (!std::isfinite(loss)) throw NumericError("denoiser training diverged at step " + std::to_string(step));
    trace.push_back(loss);
    d_eps.data *= static_cast<real>(2.0 / static_cast<double>(d_eps.data.size()));

    nn::Grad grad = net.params().zeros();
    const Mat d_prompt = net.backward(cache, d_eps, grad);
    nn::Grad table_grad = table.params().zeros();
    auto tg = table.params().view(table_grad, table.table_id());
    for (int b = 0; b < batch; ++b) tg.col(ids[b]) += d_prompt.col(b);
    net_opt.step(net.params().values(), grad);
    table_opt.step(table.params().values(), table_grad);
  }
  return trace;
}

}  // namespace difrc
