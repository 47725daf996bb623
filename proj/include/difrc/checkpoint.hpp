#pragma once

// Checkpoint container: the magic bytes "DIFRC1", a newline-terminated text
// manifest of `key=value` lines and `param=<name> <rows> <cols>` lines ended
// by a line `end`, then the raw little-endian float32 values of every
// parameter in manifest order.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "difrc/denoiser.hpp"
#include "difrc/model.hpp"
#include "difrc/nn.hpp"

namespace difrc {

struct Checkpoint {
  std::map<std::string, std::string> manifest;
  struct Tensor {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::vector<float> values;
  };
  std::vector<Tensor> tensors;

  /// Appends every entry of a parameter store.
  void add_params(const nn::ParamStore& store);
  void add_params(const nn::ParamStore& layout, const RealBuffer& values);
  /// Copies tensors into a store with a matching layout; throws ShapeError otherwise.
  void load_params(nn::ParamStore& store) const;
  void load_params(const nn::ParamStore& layout, RealBuffer& values) const;
  const std::string& get(const std::string& key) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Saves a pre-trained backbone (denoiser, prompt table and schedule) with
/// manifest kind=denoiser.
void save_backbone(const std::filesystem::path& path, const Backbone& backbone);
Backbone load_backbone(const std::filesystem::path& path);

/// Federated model checkpoint with manifest kind=flmodel.
void save_model(const std::filesystem::path& path, const FlModel& model, const ModelParams& params);
std::pair<ModelArch, ModelParams> load_model(const std::filesystem::path& path);

}  // namespace difrc
