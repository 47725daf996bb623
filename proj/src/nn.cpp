#include "difrc/nn.hpp"

#include <algorithm>
#include <cmath>

namespace difrc::nn {

FeatureMap::FeatureMap(int channels, int batch_, int height_, int width_)
    : data(Mat::Zero(channels, static_cast<Eigen::Index>(batch_) * height_ * width_)),
      batch(batch_),
      height(height_),
      width(width_) {}

ParamStore::Id ParamStore::add(std::string name, int rows, int cols) {
  Entry e{std::move(name), rows, cols, values_.size()};
  values_.resize(values_.size() + e.size(), real(0));
  entries_.push_back(std::move(e));
  return entries_.size() - 1;
}

ParamStore::Id ParamStore::find(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  throw RangeError("unknown parameter '" + std::string(name) + "'");
}

Eigen::Map<Mat> ParamStore::view(RealBuffer& buffer, Id id) const {
  const Entry& e = entries_.at(id);
  return Eigen::Map<Mat>(buffer.data() + e.offset, e.rows, e.cols);
}

Eigen::Map<const Mat> ParamStore::view(const RealBuffer& buffer, Id id) const {
  const Entry& e = entries_.at(id);
  return Eigen::Map<const Mat>(buffer.data() + e.offset, e.rows, e.cols);
}

ParamView::ParamView(const ParamStore& layout, const RealBuffer& values)
    : layout_(&layout), values_(&values) {
  if (values.size() != layout.size()) {
    throw ShapeError("parameter buffer has " + std::to_string(values.size()) + " values, layout needs " +
                     std::to_string(layout.size()));
  }
}

namespace {

void fill_normal(Eigen::Map<Mat> m, double stddev, Rng& rng) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      m(i, j) = static_cast<real>(stddev * standard_normal(rng));
    }
  }
}

// dst(:, b, y, x) += src(:, b, y + dy, x + dx) wherever the source pixel exists.
template <typename Src, typename Dst>
void shift_accumulate(const Src& src, Dst& dst, int batch, int height, int width, int dy,
                      int dx) {
  const int x0 = std::max(0, -dx);
  const int x1 = std::min(width, width - dx);
  const int n = x1 - x0;
  if (n <= 0) return;
  const Eigen::Index hw = static_cast<Eigen::Index>(height) * width;
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < height; ++y) {
      const int sy = y + dy;
      if (sy < 0 || sy >= height) continue;
      const Eigen::Index d = b * hw + static_cast<Eigen::Index>(y) * width + x0;
      const Eigen::Index s = b * hw + static_cast<Eigen::Index>(sy) * width + x0 + dx;
      dst.middleCols(d, n) += src.middleCols(s, n);
    }
  }
}

}  // namespace

Conv2d Conv2d::create(ParamStore& store, const std::string& name, int in, int out, int kernel,
                      Rng& rng, double init_scale) {
  if (kernel != 1 && kernel != 3) throw ConfigError("Conv2d supports kernel 1 or 3");
  Conv2d c;
  c.in_channels = in;
  c.out_channels = out;
  c.kernel = kernel;
  c.weight = store.add(name + ".weight", out, kernel * kernel * in);
  c.bias = store.add(name + ".bias", out, 1);
  const double fan_in = static_cast<double>(kernel * kernel * in);
  fill_normal(store.mat(c.weight), init_scale * std::sqrt(2.0 / fan_in), rng);
  return c;
}

FeatureMap Conv2d::forward(const ParamView& p, const FeatureMap& x) const {
  if (x.channels() != in_channels) {
    throw ShapeError("Conv2d expects " + std::to_string(in_channels) + " channels, got " +
                     std::to_string(x.channels()));
  }
  const auto w = p.mat(weight);
  const auto b = p.mat(bias);
  FeatureMap y(out_channels, x.batch, x.height, x.width);
  y.data.colwise() = b.col(0);
  if (kernel == 1) {
    y.data.noalias() += w * x.data;
    return y;
  }
  Mat shifted(x.data.rows(), x.data.cols());
  int tap = 0;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx, ++tap) {
      const auto block = w.middleCols(static_cast<Eigen::Index>(tap) * in_channels, in_channels);
      if (dy == 0 && dx == 0) {
        y.data.noalias() += block * x.data;
        continue;
      }
      shifted.setZero();
      shift_accumulate(x.data, shifted, x.batch, x.height, x.width, dy, dx);
      y.data.noalias() += block * shifted;
    }
  }
  return y;
}

FeatureMap Conv2d::backward(const ParamView& p, const FeatureMap& x, const FeatureMap& dy_map,
                            Grad& g) const {
  const auto w = p.mat(weight);
  auto gw = p.grad(g, weight);
  auto gb = p.grad(g, bias);
  gb.col(0) += dy_map.data.rowwise().sum();
  FeatureMap dx_map(in_channels, x.batch, x.height, x.width);
  if (kernel == 1) {
    gw.noalias() += dy_map.data * x.data.transpose();
    dx_map.data.noalias() = w.transpose() * dy_map.data;
    return dx_map;
  }
  Mat shifted(x.data.rows(), x.data.cols());
  Mat dshifted(x.data.rows(), x.data.cols());
  int tap = 0;
  for (int sy = -1; sy <= 1; ++sy) {
    for (int sx = -1; sx <= 1; ++sx, ++tap) {
      const Eigen::Index col = static_cast<Eigen::Index>(tap) * in_channels;
      const auto block = w.middleCols(col, in_channels);
      if (sy == 0 && sx == 0) {
        gw.middleCols(col, in_channels).noalias() += dy_map.data * x.data.transpose();
        dx_map.data.noalias() += block.transpose() * dy_map.data;
        continue;
      }
      shifted.setZero();
      shift_accumulate(x.data, shifted, x.batch, x.height, x.width, sy, sx);
      gw.middleCols(col, in_channels).noalias() += dy_map.data * shifted.transpose();
      dshifted.noalias() = block.transpose() * dy_map.data;
      shift_accumulate(dshifted, dx_map.data, x.batch, x.height, x.width, -sy, -sx);
    }
  }
  return dx_map;
}

Linear Linear::create(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                      double init_scale) {
  Linear l;
  l.in_features = in;
  l.out_features = out;
  l.weight = store.add(name + ".weight", out, in);
  l.bias = store.add(name + ".bias", out, 1);
  fill_normal(store.mat(l.weight), init_scale * std::sqrt(1.0 / in), rng);
  return l;
}

Mat Linear::forward(const ParamView& p, const Mat& x) const {
  if (x.rows() != in_features) {
    throw ShapeError("Linear expects " + std::to_string(in_features) + " features, got " +
                     std::to_string(x.rows()));
  }
  Mat y(out_features, x.cols());
  y.colwise() = p.mat(bias).col(0);
  y.noalias() += p.mat(weight) * x;
  return y;
}

Mat Linear::backward(const ParamView& p, const Mat& x, const Mat& dy, Grad& g) const {
  p.grad(g, weight).noalias() += dy * x.transpose();
  p.grad(g, bias).col(0) += dy.rowwise().sum();
  return p.mat(weight).transpose() * dy;
}

Mat silu(const Mat& x) {
  return x.unaryExpr([](real v) { return v / (real(1) + std::exp(-v)); });
}

Mat silu_backward(const Mat& x, const Mat& dy) {
  return dy.binaryExpr(x, [](real d, real v) {
    const real s = real(1) / (real(1) + std::exp(-v));
    return d * (s + v * s * (real(1) - s));
  });
}

FeatureMap avg_pool2(const FeatureMap& x) {
  if (x.height % 2 != 0 || x.width % 2 != 0) throw ShapeError("avg_pool2 needs even spatial size");
  FeatureMap y(x.channels(), x.batch, x.height / 2, x.width / 2);
  for (int b = 0; b < x.batch; ++b) {
    for (int yy = 0; yy < y.height; ++yy) {
      for (int xx = 0; xx < y.width; ++xx) {
        const Eigen::Index src = static_cast<Eigen::Index>(b) * x.tokens() + 2 * yy * x.width + 2 * xx;
        y.data.col(static_cast<Eigen::Index>(b) * y.tokens() + yy * y.width + xx) =
            real(0.25) * (x.data.col(src) + x.data.col(src + 1) + x.data.col(src + x.width) +
                          x.data.col(src + x.width + 1));
      }
    }
  }
  return y;
}

FeatureMap avg_pool2_backward(const FeatureMap& dy) {
  FeatureMap dx(dy.channels(), dy.batch, dy.height * 2, dy.width * 2);
  for (int b = 0; b < dy.batch; ++b) {
    for (int yy = 0; yy < dy.height; ++yy) {
      for (int xx = 0; xx < dy.width; ++xx) {
        const auto g = real(0.25) * dy.data.col(static_cast<Eigen::Index>(b) * dy.tokens() + yy * dy.width + xx);
        const Eigen::Index dst = static_cast<Eigen::Index>(b) * dx.tokens() + 2 * yy * dx.width + 2 * xx;
        dx.data.col(dst) = g;
        dx.data.col(dst + 1) = g;
        dx.data.col(dst + dx.width) = g;
        dx.data.col(dst + dx.width + 1) = g;
      }
    }
  }
  return dx;
}

FeatureMap upsample2(const FeatureMap& x) {
  FeatureMap y(x.channels(), x.batch, x.height * 2, x.width * 2);
  for (int b = 0; b < x.batch; ++b) {
    for (int yy = 0; yy < y.height; ++yy) {
      for (int xx = 0; xx < y.width; ++xx) {
        y.data.col(static_cast<Eigen::Index>(b) * y.tokens() + yy * y.width + xx) =
            x.data.col(static_cast<Eigen::Index>(b) * x.tokens() + (yy / 2) * x.width + xx / 2);
      }
    }
  }
  return y;
}

FeatureMap upsample2_backward(const FeatureMap& dy) {
  FeatureMap dx(dy.channels(), dy.batch, dy.height / 2, dy.width / 2);
  for (int b = 0; b < dy.batch; ++b) {
    for (int yy = 0; yy < dy.height; ++yy) {
      for (int xx = 0; xx < dy.width; ++xx) {
        dx.data.col(static_cast<Eigen::Index>(b) * dx.tokens() + (yy / 2) * dx.width + xx / 2) +=
            dy.data.col(static_cast<Eigen::Index>(b) * dy.tokens() + yy * dy.width + xx);
      }
    }
  }
  return dx;
}

FeatureMap concat_channels(const FeatureMap& a, const FeatureMap& b) {
  if (a.batch != b.batch || a.height != b.height || a.width != b.width) {
    throw ShapeError("concat_channels: spatial/batch mismatch");
  }
  FeatureMap y;
  y.batch = a.batch;
  y.height = a.height;
  y.width = a.width;
  y.data.resize(a.data.rows() + b.data.rows(), a.data.cols());
  y.data << a.data, b.data;
  return y;
}

void add_channel_bias(FeatureMap& x, const Mat& bias) {
  if (bias.rows() != x.channels() || bias.cols() != x.batch) {
    throw ShapeError("add_channel_bias: bias must be channels x batch");
  }
  for (int b = 0; b < x.batch; ++b) x.sample(b).colwise() += bias.col(b);
}

Mat channel_bias_backward(const FeatureMap& dy) {
  Mat g(dy.channels(), dy.batch);
  for (int b = 0; b < dy.batch; ++b) g.col(b) = dy.sample(b).rowwise().sum();
  return g;
}

Mat global_avg_pool(const FeatureMap& x) {
  Mat out(x.channels(), x.batch);
  for (int b = 0; b < x.batch; ++b) out.col(b) = x.sample(b).rowwise().mean();
  return out;
}

FeatureMap global_avg_pool_backward(const Mat& dy, int height, int width) {
  FeatureMap dx(static_cast<int>(dy.rows()), static_cast<int>(dy.cols()), height, width);
  const real scale = real(1) / static_cast<real>(height * width);
  for (int b = 0; b < dx.batch; ++b) dx.sample(b) = (dy.col(b) * scale).replicate(1, dx.tokens());
  return dx;
}

Mat flatten(const FeatureMap& x) {
  const int hw = x.tokens();
  Mat v(static_cast<Eigen::Index>(x.channels()) * hw, x.batch);
  for (int b = 0; b < x.batch; ++b) {
    for (int c = 0; c < x.channels(); ++c) {
      v.col(b).segment(static_cast<Eigen::Index>(c) * hw, hw) = x.sample(b).row(c).transpose();
    }
  }
  return v;
}

FeatureMap unflatten(const Mat& v, int channels, int height, int width) {
  const int hw = height * width;
  if (v.rows() != static_cast<Eigen::Index>(channels) * hw) throw ShapeError("unflatten: size mismatch");
  FeatureMap x(channels, static_cast<int>(v.cols()), height, width);
  for (int b = 0; b < x.batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      x.sample(b).row(c) = v.col(b).segment(static_cast<Eigen::Index>(c) * hw, hw).transpose();
    }
  }
  return x;
}

void Sgd::step(RealBuffer& params, const Grad& grad) {
  if (grad.size() != params.size()) throw ShapeError("Sgd: gradient size mismatch");
  if (velocity_.size() != params.size()) velocity_.assign(params.size(), real(0));
  const real lr = static_cast<real>(lr_);
  const real mom = static_cast<real>(momentum_);
  const real wd = static_cast<real>(weight_decay_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const real g = grad[i] + wd * params[i];
    velocity_[i] = mom * velocity_[i] + g;
    params[i] -= lr * velocity_[i];
  }
}

}  // namespace difrc::nn
