#include "difrc/representation.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include <Eigen/Eigenvalues>

namespace difrc {

Eigen::MatrixXd PcaLayer::project(const Eigen::MatrixXd& tokens) const {
  return components * (tokens.colwise() - mean);
}

Eigen::MatrixXd PcaLayer::reconstruct(const Eigen::MatrixXd& coords) const {
  return (components.transpose() * coords).colwise() + mean;
}

PcaLayer fit_pca_layer(const Eigen::MatrixXd& tokens, int target_dim) {
  const auto channels = tokens.rows();
  const auto n = tokens.cols();
  if (target_dim < 1 || target_dim > channels) {
    throw ConfigError("PCA target dim " + std::to_string(target_dim) + " must be in [1, " +
                      std::to_string(channels) + "]");
  }
  if (n < target_dim) {
    throw DataError("PCA: " + std::to_string(n) + " samples cannot support " +
                    std::to_string(target_dim) + " components");
  }
  PcaLayer layer;
  layer.mean = tokens.rowwise().mean();
  const Eigen::MatrixXd centered = tokens.colwise() - layer.mean;
  const Eigen::MatrixXd cov = centered * centered.transpose() / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw DataError("PCA: eigendecomposition failed");
  // Eigen returns ascending order.
  layer.eigenvalues = solver.eigenvalues().reverse();
  layer.components.resize(target_dim, channels);
  for (int k = 0; k < target_dim; ++k) {
    Eigen::VectorXd v = solver.eigenvectors().col(channels - 1 - k);
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (std::abs(v(i)) > 1e-12) {
        if (v(i) < 0) v = -v;
        break;
      }
    }
    layer.components.row(k) = v.transpose();
  }
  return layer;
}

int PcaBasis::dim() const {
  int d = 0;
  for (const auto& l : layers) d += l.target_dim();
  return d;
}

std::pair<int, int> PcaBasis::segment(int layer) const {
  if (layer < 2 || layer > 4) throw RangeError("fused layers are 2, 3 and 4");
  int begin = 0;
  for (int i = 0; i < layer - 2; ++i) begin += layers[i].target_dim();
  return {begin, begin + layers[layer - 2].target_dim()};
}

std::array<int, 3> default_target_dims(int d) {
  if (d < 4 || d % 4 != 0) throw ConfigError("representation dim d must be a positive multiple of 4");
  return {d / 2, d / 4, d / 4};
}

PcaBasis fit_pca(const std::array<Eigen::MatrixXd, 3>& tap_tokens_in, const std::array<int, 3>& target_dims) {
  PcaBasis basis;
  for (int i = 0; i < 3; ++i) basis.layers[i] = fit_pca_layer(tap_tokens_in[i], target_dims[i]);
  return basis;
}

std::array<Eigen::MatrixXd, 3> tap_tokens(const std::array<nn::FeatureMap, 4>& taps) {
  std::array<Eigen::MatrixXd, 3> out;
  nn::FeatureMap layer2 = taps[1];
  while (layer2.height < taps[2].height) layer2 = nn::upsample2(layer2);
  out[0] = layer2.data.cast<double>();
  out[1] = taps[2].data.cast<double>();
  out[2] = taps[3].data.cast<double>();
  return out;
}

Eigen::MatrixXd fuse(const std::array<nn::FeatureMap, 4>& taps, const PcaBasis& basis) {
  const int batch = taps[1].batch;
  Eigen::MatrixXd fused(basis.dim(), batch);
  int row = 0;
  for (int i = 0; i < 3; ++i) {
    const PcaLayer& layer = basis.layers[i];
    nn::FeatureMap map = taps[i + 1];
    if (map.channels() != layer.channels() || map.batch != batch) {
      throw ShapeError("fuse: layer " + std::to_string(i + 2) + " has " + std::to_string(map.channels()) +
                       " channels, basis expects " + std::to_string(layer.channels()));
    }
    if (i == 0) {
      while (map.height < taps[2].height) map = nn::upsample2(map);
    }
    // The projection is affine, so averaging pixels first gives the same pooled result.
    Eigen::MatrixXd pooled(map.channels(), batch);
    for (int b = 0; b < batch; ++b) pooled.col(b) = map.sample(b).cast<double>().rowwise().mean();
    fused.middleRows(row, layer.target_dim()) = layer.project(pooled);
    row += layer.target_dim();
  }
  return fused;
}

int denoising_step(double t_frac, int T) {
  if (!(t_frac > 0.0 && t_frac <= 1.0)) throw ConfigError("t_frac must be in (0, 1]");
  return std::max(1, static_cast<int>(std::lround(t_frac * T)));
}

std::array<nn::FeatureMap, 4> conditional_taps(const DenoiserNet& net,
                                               std::span<const ImageTensor* const> images,
                                               const Mat& conds, std::span<const int> prompt_ids,
                                               const PromptTable& table) {
  const std::vector<int> steps(images.size(), 0);
  return net.forward(to_feature_map(images), steps, conds, table.gather(prompt_ids)).taps;
}

std::array<nn::FeatureMap, 4> denoising_taps(const DenoiserNet& net,
                                             std::span<const ImageTensor* const> images,
                                             std::span<const int> prompt_ids, int t,
                                             const NoiseSchedule& schedule,
                                             const PromptTable& table, Rng& rng) {
  if (t < 1 || t > schedule.steps()) {
    throw RangeError("denoising extraction step " + std::to_string(t) + " outside [1, " +
                     std::to_string(schedule.steps()) + "]");
  }
  std::vector<ImageTensor> noisy;
  noisy.reserve(images.size());
  std::vector<const ImageTensor*> ptrs;
  for (const ImageTensor* img : images) noisy.push_back(forward_noise(*img, t, schedule, rng).x_t);
  for (const auto& img : noisy) ptrs.push_back(&img);
  const std::vector<int> steps(images.size(), t);
  const Mat cond = Mat::Zero(net.arch().cond_width, static_cast<Eigen::Index>(images.size()));
  return net.forward(to_feature_map(ptrs), steps, cond, table.gather(prompt_ids)).taps;
}

FusedRepresentation extract_conditional(const DenoiserNet& net, const ImageTensor& x,
                                        std::span<const double> cond, int prompt_id,
                                        const PromptTable& table, const PcaBasis& basis) {
  if (static_cast<int>(cond.size()) != net.arch().cond_width) {
    throw ShapeError("condition vector width " + std::to_string(cond.size()) + " != " +
                     std::to_string(net.arch().cond_width));
  }
  Mat c(net.arch().cond_width, 1);
  for (std::size_t i = 0; i < cond.size(); ++i) c(static_cast<Eigen::Index>(i), 0) = static_cast<real>(cond[i]);
  const ImageTensor* ptr = &x;
  const int ids[1] = {prompt_id};
  const auto taps = conditional_taps(net, std::span<const ImageTensor* const>(&ptr, 1), c, ids, table);
  return FusedRepresentation{fuse(taps, basis).col(0), RepresentationKind::kConditional, prompt_id, 0};
}

FusedRepresentation extract_denoising(const DenoiserNet& net, const ImageTensor& x, int prompt_id,
                                      int t, const NoiseSchedule& schedule,
                                      const PromptTable& table, const PcaBasis& basis, Rng& rng) {
  const ImageTensor* ptr = &x;
  const int ids[1] = {prompt_id};
  const auto taps =
      denoising_taps(net, std::span<const ImageTensor* const>(&ptr, 1), ids, t, schedule, table, rng);
  return FusedRepresentation{fuse(taps, basis).col(0), RepresentationKind::kDenoising, prompt_id, t};
}

namespace {

const char* kind_name(RepresentationKind k) {
  return k == RepresentationKind::kConditional ? "conditional" : "denoising";
}

void put_le32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

std::uint32_t get_le32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw DataError("representation dump truncated");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

}  // namespace

void write_representation_dump(const std::filesystem::path& path, RepresentationKind kind,
                               std::span<const int> ids, const Eigen::MatrixXd& vectors) {
  if (static_cast<Eigen::Index>(ids.size()) != vectors.cols()) throw ShapeError("dump: ids/vectors count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "DIFRC-REP v1 d=" << vectors.rows() << " kind=" << kind_name(kind) << '\n';
  for (std::size_t i = 0; i < ids.size(); ++i) {
    put_le32(out, static_cast<std::uint32_t>(ids[i]));
    for (Eigen::Index q = 0; q < vectors.rows(); ++q) {
      put_le32(out, std::bit_cast<std::uint32_t>(static_cast<float>(vectors(q, static_cast<Eigen::Index>(i)))));
    }
  }
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

RepresentationDump read_representation_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open representation dump '" + path.string() + "'");
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string magic, version, dfield, kfield;
  hs >> magic >> version >> dfield >> kfield;
  if (magic != "DIFRC-REP" || version != "v1" || dfield.rfind("d=", 0) != 0 || kfield.rfind("kind=", 0) != 0) {
    throw DataError("not a DIFRC-REP v1 dump");
  }
  RepresentationDump dump;
  dump.dim = std::stoi(dfield.substr(2));
  const std::string kind = kfield.substr(5);
  if (kind == "conditional") {
    dump.kind = RepresentationKind::kConditional;
  } else if (kind == "denoising") {
    dump.kind = RepresentationKind::kDenoising;
  } else {
    throw DataError("unknown representation kind '" + kind + "'");
  }
  std::vector<std::vector<double>> rows;
  while (in.peek() != std::char_traits<char>::eof()) {
    dump.ids.push_back(static_cast<int>(get_le32(in)));
    std::vector<double> v(static_cast<std::size_t>(dump.dim));
    for (double& x : v) x = std::bit_cast<float>(get_le32(in));
    rows.push_back(std::move(v));
  }
  dump.vectors.resize(dump.dim, static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int q = 0; q < dump.dim; ++q) dump.vectors(q, static_cast<Eigen::Index>(i)) = rows[i][q];
  }
  return dump;
}

}  // namespace difrc
