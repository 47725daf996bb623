#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace difrc {

// Scalar type of network activations and parameters. Loss arithmetic,
// schedules and PCA always run in double.
#ifdef DIFRC_REAL_DOUBLE
using real = double;
#else
using real = float;
#endif

using Mat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic>;
using Vec = Eigen::Matrix<real, Eigen::Dynamic, 1>;

/// Flat parameter/gradient storage. Eigen splits vectorized reductions at
/// the first aligned element, so a fixed base alignment keeps results
/// independent of where the buffer happens to be allocated.
using RealBuffer = std::vector<real, Eigen::aligned_allocator<real>>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor or parameter shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Step index, class id or prompt id outside its valid range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Malformed, empty or otherwise unusable input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A loss or parameter became NaN/Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);

/// Derives an independent seed from a base seed and up to three stream keys,
/// e.g. (seed, client, round).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

inline Rng make_rng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
                    std::uint64_t c = 0) {
  return Rng(derive_seed(seed, a, b, c));
}

double standard_normal(Rng& rng);

}  // namespace difrc
