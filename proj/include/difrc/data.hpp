#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "difrc/diffusion.hpp"

namespace difrc {

struct LabeledImages {
  std::vector<ImageTensor> images;
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
  void push_back(ImageTensor image, int label) {
    images.push_back(std::move(image));
    labels.push_back(label);
  }
  /// Per-class sample counts.
  std::vector<int> histogram() const;
  LabeledImages subset(std::span<const std::size_t> indices) const;
};

/// Procedural single-channel images, one pattern family per class, with
/// per-sample rotation/phase jitter and additive noise (sigma 0.1).
LabeledImages generate_synthetic_dataset(int num_classes, int per_class, int size,
                                         std::uint64_t seed);

/// Reads an IDX image/label pair (big-endian, magic 0x803 / 0x801) and maps
/// pixels affinely from [0, 255] to [-1, 1].
LabeledImages load_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path);

/// Splits off `per_class` samples of every class (chosen uniformly) as the
/// first result; the remainder is the second.
std::pair<LabeledImages, LabeledImages> split_balanced(const LabeledImages& data, int per_class,
                                                       std::uint64_t seed);

}  // namespace difrc
