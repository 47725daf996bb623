#include "difrc/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace difrc {

namespace {

constexpr char kMagic[] = "DIFRC1";
constexpr std::size_t kMagicLen = 6;

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, end);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw DataError("checkpoint: bad number '" + s + "'");
  return v;
}

int parse_int(const std::string& s) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw DataError("checkpoint: bad integer '" + s + "'");
  return v;
}

}  // namespace

void Checkpoint::add_params(const nn::ParamStore& store) { add_params(store, store.values()); }

void Checkpoint::add_params(const nn::ParamStore& layout, const RealBuffer& values) {
  if (values.size() != layout.size()) throw ShapeError("parameter buffer does not match its layout");
  for (const auto& e : layout.entries()) {
    Tensor t{e.name, e.rows, e.cols, {}};
    t.values.resize(e.size());
    for (std::size_t k = 0; k < e.size(); ++k) t.values[k] = static_cast<float>(values[e.offset + k]);
    tensors.push_back(std::move(t));
  }
}

void Checkpoint::load_params(nn::ParamStore& store) const { load_params(store, store.values()); }

void Checkpoint::load_params(const nn::ParamStore& layout, RealBuffer& values) const {
  values.resize(layout.size());
  for (const auto& e : layout.entries()) {
    const Tensor* found = nullptr;
    for (const auto& t : tensors) {
      if (t.name == e.name) found = &t;
    }
    if (found == nullptr) throw ShapeError("checkpoint lacks parameter '" + e.name + "'");
    if (found->rows != e.rows || found->cols != e.cols) {
      throw ShapeError("checkpoint parameter '" + e.name + "' has shape " +
                       std::to_string(found->rows) + "x" + std::to_string(found->cols));
    }
    for (std::size_t k = 0; k < e.size(); ++k) values[e.offset + k] = static_cast<real>(found->values[k]);
  }
}

const std::string& Checkpoint::get(const std::string& key) const {
  auto it = manifest.find(key);
  if (it == manifest.end()) throw DataError("checkpoint manifest lacks '" + key + "'");
  return it->second;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(kMagic, kMagicLen);
  out << '\n';
  for (const auto& [k, v] : ck.manifest) out << k << '=' << v << '\n';
  for (const auto& t : ck.tensors) out << "param=" << t.name << ' ' << t.rows << ' ' << t.cols << '\n';
  out << "end\n";
  for (const auto& t : ck.tensors) {
    for (float f : t.values) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                             static_cast<char>((bits >> 16) & 0xff),
                             static_cast<char>((bits >> 24) & 0xff)};
      out.write(bytes, 4);
    }
  }
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0) throw DataError("not a DIFRC1 checkpoint");
  std::string line;
  std::getline(in, line);
  Checkpoint ck;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("checkpoint: malformed manifest line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "param") {
      std::istringstream ss(value);
      Checkpoint::Tensor t;
      if (!(ss >> t.name >> t.rows >> t.cols) || t.rows < 0 || t.cols < 0) {
        throw DataError("checkpoint: malformed param line '" + line + "'");
      }
      ck.tensors.push_back(std::move(t));
    } else {
      ck.manifest[key] = value;
    }
  }
  if (!ended) throw DataError("checkpoint: manifest not terminated");
  for (auto& t : ck.tensors) {
    t.values.resize(static_cast<std::size_t>(t.rows) * t.cols);
    for (float& f : t.values) {
      unsigned char b[4];
      in.read(reinterpret_cast<char*>(b), 4);
      if (!in) throw DataError("checkpoint: truncated parameter data");
      const std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
                                 (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
      f = std::bit_cast<float>(bits);
    }
  }
  return ck;
}

void save_backbone(const std::filesystem::path& path, const Backbone& bb) {
  const auto& a = bb.net.arch();
  Checkpoint ck;
  ck.manifest["kind"] = "denoiser";
  ck.manifest["image_channels"] = std::to_string(a.image_channels);
  ck.manifest["image_size"] = std::to_string(a.image_size);
  ck.manifest["top_channels"] = std::to_string(a.top_channels);
  ck.manifest["down_channels"] = std::to_string(a.down_channels);
  for (int i = 0; i < 4; ++i) ck.manifest["tap" + std::to_string(i + 1) + "_channels"] = std::to_string(a.tap_channels[i]);
  ck.manifest["time_dim"] = std::to_string(a.time_dim);
  ck.manifest["emb_dim"] = std::to_string(a.emb_dim);
  ck.manifest["cond_width"] = std::to_string(a.cond_width);
  ck.manifest["num_classes"] = std::to_string(bb.table.num_classes());
  ck.manifest["T"] = std::to_string(bb.schedule_config.steps);
  ck.manifest["schedule"] = bb.schedule_config.kind == ScheduleKind::kLinear ? "linear" : "constant";
  ck.manifest["gamma_min"] = fmt_double(bb.schedule_config.gamma_min);
  ck.manifest["gamma_max"] = fmt_double(bb.schedule_config.gamma_max);
  ck.add_params(bb.net.params());
  ck.add_params(bb.table.params());
  write_checkpoint(path, ck);
}

Backbone load_backbone(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.get("kind") != "denoiser") throw DataError("checkpoint kind is not 'denoiser'");
  DenoiserArch a;
  a.image_channels = parse_int(ck.get("image_channels"));
  a.image_size = parse_int(ck.get("image_size"));
  a.top_channels = parse_int(ck.get("top_channels"));
  a.down_channels = parse_int(ck.get("down_channels"));
  for (int i = 0; i < 4; ++i) a.tap_channels[i] = parse_int(ck.get("tap" + std::to_string(i + 1) + "_channels"));
  a.time_dim = parse_int(ck.get("time_dim"));
  a.emb_dim = parse_int(ck.get("emb_dim"));
  a.cond_width = parse_int(ck.get("cond_width"));
  ScheduleConfig sc;
  sc.steps = parse_int(ck.get("T"));
  sc.kind = ck.get("schedule") == "linear" ? ScheduleKind::kLinear : ScheduleKind::kConstant;
  sc.gamma_min = parse_double(ck.get("gamma_min"));
  sc.gamma_max = parse_double(ck.get("gamma_max"));
  Rng rng(0);
  Backbone bb{DenoiserNet(a, 0), PromptTable(parse_int(ck.get("num_classes")), a.cond_width, rng), sc,
              sc.build()};
  ck.load_params(bb.net.params());
  ck.load_params(bb.table.params());
  return bb;
}

void save_model(const std::filesystem::path& path, const FlModel& model, const ModelParams& params) {
  const auto& a = model.arch();
  Checkpoint ck;
  ck.manifest["kind"] = "flmodel";
  ck.manifest["image_channels"] = std::to_string(a.image_channels);
  ck.manifest["image_size"] = std::to_string(a.image_size);
  ck.manifest["conv1"] = std::to_string(a.conv1);
  ck.manifest["conv2"] = std::to_string(a.conv2);
  ck.manifest["conv3"] = std::to_string(a.conv3);
  ck.manifest["dim"] = std::to_string(a.dim);
  ck.manifest["num_classes"] = std::to_string(a.num_classes);
  ck.manifest["global_pool"] = a.global_pool ? "1" : "0";
  ck.add_params(model.encoder_layout(), params.encoder);
  ck.add_params(model.classifier_layout(), params.classifier);
  write_checkpoint(path, ck);
}

std::pair<ModelArch, ModelParams> load_model(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.get("kind") != "flmodel") throw DataError("checkpoint kind is not 'flmodel'");
  ModelArch a;
  a.image_channels = parse_int(ck.get("image_channels"));
  a.image_size = parse_int(ck.get("image_size"));
  a.conv1 = parse_int(ck.get("conv1"));
  a.conv2 = parse_int(ck.get("conv2"));
  a.conv3 = parse_int(ck.get("conv3"));
  a.dim = parse_int(ck.get("dim"));
  a.num_classes = parse_int(ck.get("num_classes"));
  a.global_pool = parse_int(ck.get("global_pool")) != 0;
  const FlModel model(a);
  ModelParams p;
  ck.load_params(model.encoder_layout(), p.encoder);
  ck.load_params(model.classifier_layout(), p.classifier);
  return {a, std::move(p)};
}

}  // namespace difrc
