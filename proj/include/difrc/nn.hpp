#pragma once

// Minimal layer library with hand-written backward passes.
//
// Activations are stored channel-major: a FeatureMap holds a
// (channels x batch*height*width) matrix whose column b*H*W + y*W + x is the
// channel vector of sample b at pixel (y, x). Dense activations use the same
// convention with one column per sample.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "difrc/common.hpp"

namespace difrc::nn {

struct FeatureMap {
  Mat data;
  int batch = 0;
  int height = 0;
  int width = 0;

  FeatureMap() = default;
  FeatureMap(int channels, int batch, int height, int width);

  int channels() const { return static_cast<int>(data.rows()); }
  int tokens() const { return height * width; }
  /// Columns belonging to sample b.
  auto sample(int b) { return data.middleCols(static_cast<Eigen::Index>(b) * tokens(), tokens()); }
  auto sample(int b) const {
    return data.middleCols(static_cast<Eigen::Index>(b) * tokens(), tokens());
  }
};

/// Flat parameter buffer with named matrix slices. Gradients, momentum and
/// aggregation all work on buffers with the same layout.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::size_t offset = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
  };

  using Id = std::size_t;

  Id add(std::string name, int rows, int cols);

  std::size_t size() const { return values_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  const Entry& entry(Id id) const { return entries_.at(id); }
  /// Looks up an entry by name; throws RangeError if absent.
  Id find(std::string_view name) const;

  RealBuffer& values() { return values_; }
  const RealBuffer& values() const { return values_; }

  Eigen::Map<Mat> mat(Id id) { return view(values_, id); }
  Eigen::Map<const Mat> mat(Id id) const { return view(values_, id); }

  Eigen::Map<Mat> view(RealBuffer& buffer, Id id) const;
  Eigen::Map<const Mat> view(const RealBuffer& buffer, Id id) const;

  RealBuffer zeros() const { return RealBuffer(values_.size(), real(0)); }

 private:
  std::vector<Entry> entries_;
  RealBuffer values_;
};

using Grad = RealBuffer;

/// Read-only view pairing a layout with a value buffer, so one network
/// definition can run on many parameter copies.
class ParamView {
 public:
  ParamView(const ParamStore& store)  // NOLINT(google-explicit-constructor)
      : layout_(&store), values_(&store.values()) {}
  ParamView(const ParamStore& layout, const RealBuffer& values);

  Eigen::Map<const Mat> mat(ParamStore::Id id) const { return layout_->view(*values_, id); }
  Eigen::Map<Mat> grad(Grad& g, ParamStore::Id id) const { return layout_->view(g, id); }
  const ParamStore& layout() const { return *layout_; }

 private:
  const ParamStore* layout_;
  const RealBuffer* values_;
};

/// 1x1 or 3x3 convolution, stride 1, zero padding preserving spatial size.
struct Conv2d {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  ParamStore::Id weight = 0;  // out x (kernel*kernel*in), tap-major blocks
  ParamStore::Id bias = 0;    // out x 1

  static Conv2d create(ParamStore& store, const std::string& name, int in, int out, int kernel,
                       Rng& rng, double init_scale = 1.0);

  FeatureMap forward(const ParamView& p, const FeatureMap& x) const;
  /// Accumulates parameter gradients into g and returns dL/dx.
  FeatureMap backward(const ParamView& p, const FeatureMap& x, const FeatureMap& dy,
                      Grad& g) const;
};

/// Fully-connected layer on column vectors: y = W x + b.
struct Linear {
  int in_features = 0;
  int out_features = 0;
  ParamStore::Id weight = 0;
  ParamStore::Id bias = 0;

  static Linear create(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                       double init_scale = 1.0);

  Mat forward(const ParamView& p, const Mat& x) const;
  Mat backward(const ParamView& p, const Mat& x, const Mat& dy, Grad& g) const;
};

Mat silu(const Mat& x);
/// dL/dx given the pre-activation x and dL/dy.
Mat silu_backward(const Mat& x, const Mat& dy);

FeatureMap avg_pool2(const FeatureMap& x);
FeatureMap avg_pool2_backward(const FeatureMap& dy);
FeatureMap upsample2(const FeatureMap& x);
FeatureMap upsample2_backward(const FeatureMap& dy);

/// Channel concatenation (a on top of b).
FeatureMap concat_channels(const FeatureMap& a, const FeatureMap& b);

/// Adds a per-sample channel bias (channels x batch) to every pixel.
void add_channel_bias(FeatureMap& x, const Mat& bias);
/// Gradient of add_channel_bias with respect to the bias.
Mat channel_bias_backward(const FeatureMap& dy);

/// Spatial mean per channel: (C x B*HW) to (C x B).
Mat global_avg_pool(const FeatureMap& x);
FeatureMap global_avg_pool_backward(const Mat& dy, int height, int width);

/// (C x B*HW) feature map to (C*HW x B) vectors, row index c*HW + p.
Mat flatten(const FeatureMap& x);
FeatureMap unflatten(const Mat& v, int channels, int height, int width);

/// SGD with momentum and L2 weight decay applied to the gradient.
class Sgd {
 public:
  Sgd(double lr, double momentum, double weight_decay)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void step(RealBuffer& params, const Grad& grad);

 private:
  double lr_;
  double momentum_;
  double weight_decay_;
  RealBuffer velocity_;
};

}  // namespace difrc::nn
