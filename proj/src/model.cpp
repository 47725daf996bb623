#include "difrc/model.hpp"

#include <cmath>

namespace difrc {

namespace {

int proj_inputs(const ModelArch& a) {
  const int s = a.image_size / 4;
  return a.global_pool ? a.conv3 : a.conv3 * s * s;
}

}  // namespace

bool ModelParams::all_finite() const {
  for (real v : encoder) {
    if (!std::isfinite(v)) return false;
  }
  for (real v : classifier) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

FlModel::FlModel(const ModelArch& arch) : arch_(arch) {
  if (arch.image_size % 4 != 0) throw ConfigError("model image size must be a multiple of 4");
  // Layout only; init() draws the values.
  Rng rng(0);
  c1_ = nn::Conv2d::create(enc_, "enc.conv1", arch.image_channels, arch.conv1, 3, rng);
  c2_ = nn::Conv2d::create(enc_, "enc.conv2", arch.conv1, arch.conv2, 3, rng);
  c3_ = nn::Conv2d::create(enc_, "enc.conv3", arch.conv2, arch.conv3, 3, rng);
  proj_ = nn::Linear::create(enc_, "enc.proj", proj_inputs(arch), arch.dim, rng);
  head_ = nn::Linear::create(cls_, "cls.fc", arch.dim, arch.num_classes, rng);
}

ModelParams FlModel::init(std::uint64_t seed) const {
  Rng rng(seed);
  nn::ParamStore enc, cls;
  nn::Conv2d::create(enc, "enc.conv1", arch_.image_channels, arch_.conv1, 3, rng);
  nn::Conv2d::create(enc, "enc.conv2", arch_.conv1, arch_.conv2, 3, rng);
  nn::Conv2d::create(enc, "enc.conv3", arch_.conv2, arch_.conv3, 3, rng);
  nn::Linear::create(enc, "enc.proj", proj_inputs(arch_), arch_.dim, rng);
  nn::Linear::create(cls, "cls.fc", arch_.dim, arch_.num_classes, rng);
  return ModelParams{enc.values(), cls.values()};
}

Mat FlModel::encode(const ModelParams& params, const nn::FeatureMap& x, Cache* cache) const {
  const nn::ParamView p(enc_, params.encoder);
  nn::FeatureMap a1 = c1_.forward(p, x);
  nn::FeatureMap h = a1;
  h.data = nn::silu(a1.data);
  nn::FeatureMap p1 = nn::avg_pool2(h);
  nn::FeatureMap a2 = c2_.forward(p, p1);
  h = a2;
  h.data = nn::silu(a2.data);
  nn::FeatureMap p2 = nn::avg_pool2(h);
  nn::FeatureMap a3 = c3_.forward(p, p2);
  h = a3;
  h.data = nn::silu(a3.data);
  Mat flat = arch_.global_pool ? nn::global_avg_pool(h) : nn::flatten(h);
  Mat z = proj_.forward(p, flat);
  if (cache != nullptr) {
    cache->x = x;
    cache->pre1 = std::move(a1);
    cache->pool1 = std::move(p1);
    cache->pre2 = std::move(a2);
    cache->pool2 = std::move(p2);
    cache->pre3 = std::move(a3);
    cache->flat = std::move(flat);
    cache->z = z;
  }
  return z;
}

Mat FlModel::classify(const ModelParams& params, const Mat& z) const {
  return head_.forward(nn::ParamView(cls_, params.classifier), z);
}

void FlModel::encoder_backward(const ModelParams& params, const Cache& c, const Mat& dz,
                               RealBuffer& grad) const {
  const nn::ParamView p(enc_, params.encoder);
  if (grad.size() != enc_.size()) throw ShapeError("encoder gradient buffer has wrong size");
  const Mat d_flat = proj_.backward(p, c.flat, dz, grad);
  nn::FeatureMap d = arch_.global_pool
                         ? nn::global_avg_pool_backward(d_flat, c.pre3.height, c.pre3.width)
                         : nn::unflatten(d_flat, c.pre3.channels(), c.pre3.height, c.pre3.width);
  d.data = nn::silu_backward(c.pre3.data, d.data);
  d = nn::avg_pool2_backward(c3_.backward(p, c.pool2, d, grad));
  d.data = nn::silu_backward(c.pre2.data, d.data);
  d = nn::avg_pool2_backward(c2_.backward(p, c.pool1, d, grad));
  d.data = nn::silu_backward(c.pre1.data, d.data);
  c1_.backward(p, c.x, d, grad);
}

Mat FlModel::classifier_backward(const ModelParams& params, const Mat& z, const Mat& dlogits,
                                 RealBuffer& grad) const {
  if (grad.size() != cls_.size()) throw ShapeError("classifier gradient buffer has wrong size");
  return head_.backward(nn::ParamView(cls_, params.classifier), z, dlogits, grad);
}

}  // namespace difrc
