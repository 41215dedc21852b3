#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dvmvs/depth_network.hpp"
#include "dvmvs/fusion_cell.hpp"

namespace dvmvs {

struct ModelConfig {
  int plane_count = kDefaultPlaneCount;
  DepthRange range;
  CellConfig cell;
  std::uint64_t seed = 1;
};

/// Pair network plus the bottleneck recurrent cell. Copying a model aliases
/// its parameters; use clone() for an independent copy.
class VideoDepthModel {
 public:
  VideoDepthModel() = default;
  explicit VideoDepthModel(const ModelConfig& config);

  VideoDepthModel clone() const;

  const ModelConfig& config() const { return config_; }
  const PairNetwork& network() const { return network_; }
  const FusionCell& cell() const { return cell_; }
  FusionCell& cell() { return cell_; }
  PlaneHypotheses planes() const;

  /// All learnable tensors in a fixed order. Names start with the group:
  /// extractor, fpn, encoder, decoder or cell.
  ParameterList parameters();
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;

  /// Marks parameters trainable iff their group is listed.
  void set_trainable_groups(const std::vector<std::string>& groups);

 private:
  ModelConfig config_;
  PairNetwork network_;
  FusionCell cell_;
};

std::string parameter_group(const std::string& name);

// ---------------------------------------------------------------------------
// Checkpoint file, little-endian:
//   char[8]  magic "DVMVSCKP"
//   uint32   version (1)
//   uint32   tensor count
//   per tensor:
//     uint32 name length, name bytes (no terminator)
//     uint32 rank, rank x uint32 dims
//     prod(dims) x float64 values

inline constexpr char kCheckpointMagic[8] = {'D', 'V', 'M', 'V', 'S', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_checkpoint(const std::filesystem::path& path);

void save_model(const std::filesystem::path& path, const VideoDepthModel& model);
/// Loads values into an existing model. Every checkpoint tensor must match
/// a model parameter by name and shape; parameters missing from the file
/// keep their values when allow_partial is set.
void load_model(const std::filesystem::path& path, VideoDepthModel& model,
                bool allow_partial = false);

/// Copies values of matching names from source into target.
void copy_parameters(const VideoDepthModel& source, VideoDepthModel& target,
                     const std::vector<std::string>& groups);

}  // namespace dvmvs
