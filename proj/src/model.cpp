#include "dvmvs/model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace dvmvs {

VideoDepthModel::VideoDepthModel(const ModelConfig& config) : config_(config) {
  std::mt19937_64 rng(config.seed);
  network_ = PairNetwork(config.plane_count, rng);
  CellConfig cell = config.cell;
  cell.channels = kBottleneckChannels;
  config_.cell = cell;
  cell_ = FusionCell(cell, rng);
}

VideoDepthModel VideoDepthModel::clone() const {
  VideoDepthModel copy = *this;
  for (auto& p : copy.parameters()) {
    *p.tensor = p.tensor->clone_leaf(p.tensor->requires_grad());
  }
  return copy;
}

PlaneHypotheses VideoDepthModel::planes() const {
  return sample_planes(config_.range.near, config_.range.far, config_.plane_count);
}

ParameterList VideoDepthModel::parameters() {
  ParameterList out;
  network_.collect(out);
  cell_.collect(out);
  return out;
}

NamedTensors VideoDepthModel::named_tensors() const {
  NamedTensors out;
  for (auto& p : const_cast<VideoDepthModel*>(this)->parameters()) {
    out.emplace_back(p.name, *p.tensor);
  }
  return out;
}

std::string parameter_group(const std::string& name) {
  return name.substr(0, name.find('.'));
}

void VideoDepthModel::set_trainable_groups(const std::vector<std::string>& groups) {
  for (auto& p : parameters()) {
    const bool trainable =
        std::find(groups.begin(), groups.end(), parameter_group(p.name)) != groups.end();
    p.tensor->set_requires_grad(trainable);
  }
}

// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

void put_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint32_t get_u32(std::istream& in, const std::filesystem::path& path) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
    throw std::runtime_error("checkpoint " + path.string() + ": truncated file");
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& in, const std::filesystem::path& path) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) {
    throw std::runtime_error("checkpoint " + path.string() + ": truncated file");
  }
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
    for (int d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : tensor.values()) put_f64(out, v);
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

NamedTensors read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  if (!in.read(magic, sizeof(magic)) ||
      std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("checkpoint " + path.string() + ": bad magic");
  }
  const std::uint32_t version = get_u32(in, path);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint " + path.string() + ": unsupported version " +
                             std::to_string(version));
  }
  const std::uint32_t count = get_u32(in, path);
  NamedTensors tensors;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_length = get_u32(in, path);
    std::string name(name_length, '\0');
    if (!in.read(name.data(), name_length)) {
      throw std::runtime_error("checkpoint " + path.string() + ": truncated name");
    }
    const std::uint32_t rank = get_u32(in, path);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(static_cast<int>(get_u32(in, path)));
    }
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = get_f64(in, path);
    tensors.emplace_back(std::move(name), Tensor::from(shape, std::move(values)));
  }
  return tensors;
}

void save_model(const std::filesystem::path& path, const VideoDepthModel& model) {
  write_checkpoint(path, model.named_tensors());
}

void load_model(const std::filesystem::path& path, VideoDepthModel& model,
                bool allow_partial) {
  const NamedTensors stored = read_checkpoint(path);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, tensor] : stored) by_name[name] = &tensor;
  std::size_t used = 0;
  for (auto& p : model.parameters()) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      if (allow_partial) continue;
      throw std::runtime_error("checkpoint " + path.string() + ": missing " + p.name);
    }
    if (it->second->shape() != p.tensor->shape()) {
      throw std::runtime_error("checkpoint " + path.string() + ": shape mismatch for " +
                               p.name);
    }
    const auto src = it->second->values();
    std::copy(src.begin(), src.end(), p.tensor->mutable_values().begin());
    ++used;
  }
  if (used != stored.size()) {
    throw std::runtime_error("checkpoint " + path.string() +
                             ": contains tensors the model does not have");
  }
}

void copy_parameters(const VideoDepthModel& source, VideoDepthModel& target,
                     const std::vector<std::string>& groups) {
  const NamedTensors values = source.named_tensors();
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, tensor] : values) by_name[name] = &tensor;
  for (auto& p : target.parameters()) {
    if (std::find(groups.begin(), groups.end(), parameter_group(p.name)) == groups.end()) {
      continue;
    }
    const auto it = by_name.find(p.name);
    if (it == by_name.end() || it->second->shape() != p.tensor->shape()) continue;
    const auto src = it->second->values();
    std::copy(src.begin(), src.end(), p.tensor->mutable_values().begin());
  }
}

}  // namespace dvmvs
