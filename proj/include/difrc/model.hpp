#pragma once

#include <span>
#include <vector>

#include "difrc/nn.hpp"

namespace difrc {

/// Layout of the federated model: a small CNN encoder h(u) mapping an image
/// to a d-dim embedding z, and a linear classifier g(v) from z to logits.
struct ModelArch {
  int image_channels = 1;
  int image_size = 16;
  int conv1 = 16;
  int conv2 = 32;
  int conv3 = 32;
  int dim = 64;
  int num_classes = 10;
  /// Global average pooling before the projection; otherwise the final
  /// feature map is flattened.
  bool global_pool = true;
};

/// Parameter vectors {u, v} of one model copy.
struct ModelParams {
  RealBuffer encoder;
  RealBuffer classifier;

  bool all_finite() const;
  bool same_shape(const ModelParams& o) const {
    return encoder.size() == o.encoder.size() && classifier.size() == o.classifier.size();
  }
};

/// Stateless network definition; parameters are passed in explicitly so the
/// same model serves every client.
class FlModel {
 public:
  struct Cache {
    nn::FeatureMap x, pre1, pool1, pre2, pool2, pre3;
    Mat flat, z;
  };

  FlModel() = default;
  explicit FlModel(const ModelArch& arch);

  const ModelArch& arch() const { return arch_; }
  const nn::ParamStore& encoder_layout() const { return enc_; }
  const nn::ParamStore& classifier_layout() const { return cls_; }

  ModelParams init(std::uint64_t seed) const;

  /// Embeddings z (dim x B).
  Mat encode(const ModelParams& params, const nn::FeatureMap& x, Cache* cache = nullptr) const;
  /// Logits (num_classes x B).
  Mat classify(const ModelParams& params, const Mat& z) const;

  /// Backpropagates dL/dz through the encoder into grad (encoder layout).
  void encoder_backward(const ModelParams& params, const Cache& cache, const Mat& dz,
                        RealBuffer& grad) const;
  /// Accumulates classifier gradients, returns dL/dz.
  Mat classifier_backward(const ModelParams& params, const Mat& z, const Mat& dlogits,
                          RealBuffer& grad) const;

 private:
  ModelArch arch_;
  nn::ParamStore enc_;
  nn::ParamStore cls_;
  nn::Conv2d c1_, c2_, c3_;
  nn::Linear proj_;
  nn::Linear head_;
};

}  // namespace difrc
