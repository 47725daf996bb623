#include "difrc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace difrc {

std::vector<int> LabeledImages::histogram() const {
  std::vector<int> h(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw RangeError("label " + std::to_string(y) + " out of range");
    ++h[static_cast<std::size_t>(y)];
  }
  return h;
}

LabeledImages LabeledImages::subset(std::span<const std::size_t> indices) const {
  LabeledImages out;
  out.num_classes = num_classes;
  out.images.reserve(indices.size());
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(images.at(i), labels.at(i));
  return out;
}

namespace {

constexpr double kPi = 3.14159265358979323846;

double smoothstep_band(double d, double width) { return std::exp(-(d * d) / (width * width)); }

// Intensity in [0, 1] of pattern family `family` at centred coordinates (u, v).
double pattern(int family, int variant, double u, double v, double theta, double phase,
               double ox, double oy) {
  const double c = std::cos(theta), s = std::sin(theta);
  const double ru = c * u + s * v;
  const double rv = -s * u + c * v;
  const double freq = 1.0 + 0.5 * variant;
  switch (family) {
    case 0:  // oriented bar through the centre
      return smoothstep_band(rv, 0.18);
    case 1: {  // concentric rings
      const double r = std::hypot(u - ox, v - oy);
      return 0.5 + 0.5 * std::cos(2.0 * kPi * 1.6 * freq * r + phase);
    }
    case 2:  // checkerboard
      return (std::sin(kPi * 2.0 * freq * ru + phase) * std::sin(kPi * 2.0 * freq * rv + phase) > 0) ? 1.0 : 0.0;
    case 3:  // linear intensity ramp
      return 0.5 + 0.5 * std::clamp(ru, -1.0, 1.0);
    case 4: {  // gaussian blob
      const double dx = u - ox * 1.5, dy = v - oy * 1.5;
      return std::exp(-(dx * dx + dy * dy) / (0.35 * 0.35));
    }
    case 5:  // cross
      return std::max(smoothstep_band(ru, 0.15), smoothstep_band(rv, 0.15));
    case 6: {  // corner (L shape)
      const double a = smoothstep_band(ru + 0.4, 0.15) * (rv > -0.4 ? 1.0 : 0.0);
      const double b = smoothstep_band(rv + 0.4, 0.15) * (ru > -0.4 ? 1.0 : 0.0);
      return std::max(a, b);
    }
    case 7:  // stripes mixing two frequencies
      return 0.5 + 0.25 * std::sin(2.0 * kPi * 1.5 * freq * ru + phase) +
             0.25 * std::sin(2.0 * kPi * 3.0 * freq * ru + 2.0 * phase);
    case 8: {  // dot lattice
      const double gu = ru * 2.0 * freq + phase / kPi, gv = rv * 2.0 * freq + phase / kPi;
      const double du = gu - std::round(gu), dv = gv - std::round(gv);
      return std::exp(-(du * du + dv * dv) / 0.05);
    }
    default: {  // wedge: angular sector around the centre
      const double ang = std::atan2(rv, ru);
      return std::abs(ang) < 0.5 ? 1.0 : 0.0;
    }
  }
}

}  // namespace

LabeledImages generate_synthetic_dataset(int num_classes, int per_class, int size,
                                         std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (size < 8) throw ConfigError("synthetic image size must be at least 8");
  if (per_class < 0) throw ConfigError("per_class must be non-negative");
  LabeledImages data;
  data.num_classes = num_classes;
  Rng rng = make_rng(seed, 0x5eed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int k = 0; k < per_class; ++k) {
    for (int label = 0; label < num_classes; ++label) {
      const int family = label % 10;
      const int variant = label / 10;
      // Orientation jitter around a class-specific base angle.
      const double base = kPi * 0.25 * (family % 4);
      const double theta = base + (uni(rng) - 0.5) * (kPi / 3.0);
      const double phase = uni(rng) * 2.0 * kPi;
      const double ox = (uni(rng) - 0.5) * 0.5;
      const double oy = (uni(rng) - 0.5) * 0.5;
      const double scale = 0.85 + 0.3 * uni(rng);
      const double amplitude = 0.6 + 0.4 * uni(rng);
      // Low-frequency background ramp shared by all families.
      const double bg_angle = uni(rng) * 2.0 * kPi;
      const double bg = 0.2 * uni(rng);
      ImageTensor img(1, size, size);
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const double u = (2.0 * x + 1.0) / size - 1.0;
          const double v = (2.0 * y + 1.0) / size - 1.0;
          const double p = pattern(family, variant, (u - 0.5 * ox) / scale, (v - 0.5 * oy) / scale, theta, phase, ox, oy);
          const double ramp = bg * (std::cos(bg_angle) * u + std::sin(bg_angle) * v);
          const double val = amplitude * (2.0 * p - 1.0) + ramp + 0.1 * standard_normal(rng);
          img.at(0, y, x) = std::clamp(val, -1.0, 1.0);
        }
      }
      data.push_back(std::move(img), label);
    }
  }
  return data;
}

namespace {

std::uint32_t read_be32(std::istream& in, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw DataError(std::string("IDX: truncated header (") + what + ")");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace

LabeledImages load_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path) {
  std::ifstream img_in(images_path, std::ios::binary);
  if (!img_in) throw DataError("IDX: cannot open '" + images_path.string() + "'");
  std::ifstream lab_in(labels_path, std::ios::binary);
  if (!lab_in) throw DataError("IDX: cannot open '" + labels_path.string() + "'");

  if (read_be32(img_in, "image magic") != 0x00000803) throw DataError("IDX: bad image magic");
  const std::uint32_t count = read_be32(img_in, "image count");
  const std::uint32_t rows = read_be32(img_in, "rows");
  const std::uint32_t cols = read_be32(img_in, "cols");
  if (read_be32(lab_in, "label magic") != 0x00000801) throw DataError("IDX: bad label magic");
  const std::uint32_t label_count = read_be32(lab_in, "label count");
  if (count != label_count) {
    throw DataError("IDX: image count " + std::to_string(count) + " != label count " +
                    std::to_string(label_count));
  }
  if (rows == 0 || cols == 0) throw DataError("IDX: zero image dimension");

  LabeledImages data;
  std::vector<unsigned char> pixels(static_cast<std::size_t>(rows) * cols);
  int max_label = -1;
  for (std::uint32_t i = 0; i < count; ++i) {
    img_in.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!img_in) throw DataError("IDX: truncated image data");
    unsigned char label = 0;
    lab_in.read(reinterpret_cast<char*>(&label), 1);
    if (!lab_in) throw DataError("IDX: truncated label data");
    ImageTensor img(1, static_cast<int>(rows), static_cast<int>(cols));
    for (std::size_t k = 0; k < pixels.size(); ++k) img.data[k] = pixels[k] / 127.5 - 1.0;
    data.push_back(std::move(img), label);
    max_label = std::max(max_label, static_cast<int>(label));
  }
  data.num_classes = max_label + 1;
  return data;
}

std::pair<LabeledImages, LabeledImages> split_balanced(const LabeledImages& data, int per_class,
                                                       std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x5b1);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.num_classes));
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);
  std::vector<std::size_t> first, second;
  for (auto& idx : by_class) {
    if (static_cast<int>(idx.size()) < per_class) throw DataError("split_balanced: class has too few samples");
    std::shuffle(idx.begin(), idx.end(), rng);
    first.insert(first.end(), idx.begin(), idx.begin() + per_class);
    second.insert(second.end(), idx.begin() + per_class, idx.end());
  }
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  return {data.subset(first), data.subset(second)};
}

}  // namespace difrc
