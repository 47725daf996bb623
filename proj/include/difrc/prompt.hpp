#pragma once

#include <span>

#include "difrc/nn.hpp"

namespace difrc {

/// Trainable prompt-feature table: one row per class name plus three
/// reserved generic prompts. Trained together with the denoiser and frozen
/// during federated rounds.
class PromptTable {
 public:
  PromptTable() = default;
  PromptTable(int num_classes, int width, Rng& rng);

  int num_classes() const { return num_classes_; }
  int rows() const { return num_classes_ + 3; }
  int width() const { return width_; }

  /// "a photo of a similar object": self-supervised positive.
  int generic_positive() const { return num_classes_; }
  /// "a photo of a visual object": self-supervised consistency target.
  int generic_object() const { return num_classes_ + 1; }
  /// Reserved generic row that can extend the self-supervised negative pool.
  int neg_pool_base() const { return num_classes_ + 2; }
  bool is_reserved(int id) const { return id >= num_classes_ && id < rows(); }

  /// Row `id` as a column vector; throws RangeError for unknown ids.
  Vec row(int id) const;
  /// Stacks the rows of `ids` as columns (width x ids.size()).
  Mat gather(std::span<const int> ids) const;

  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  nn::ParamStore::Id table_id() const { return table_; }

 private:
  int num_classes_ = 0;
  int width_ = 0;
  nn::ParamStore store_;
  nn::ParamStore::Id table_ = 0;  // width x rows, one column per prompt
};

/// Pure table lookup.
Vec embed_prompt(int id, const PromptTable& table);

}  // namespace difrc
