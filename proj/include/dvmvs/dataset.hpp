#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvmvs/depth_map.hpp"
#include "dvmvs/geometry.hpp"
#include "dvmvs/tensor.hpp"

namespace dvmvs {

/// 8-bit interleaved RGB image.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 3 bytes per pixel
};

struct Frame {
  RgbImage image;
  Pose pose;       // camera-to-world
  DepthMap depth;  // meters; may be empty when unknown
};

struct Sequence {
  std::string name;
  CameraIntrinsics intrinsics;
  std::vector<Frame> frames;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Depth PNG convention: 16-bit grayscale, millimeters, 0 = invalid.
inline constexpr double kDepthPngScale = 1000.0;

void write_rgb_png(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_rgb_png(const std::filesystem::path& path);

struct DepthWriteResult {
  std::size_t saturated = 0;  // valid pixels clamped to 65535 mm
  std::size_t underflow = 0;  // valid pixels that rounded to 0 mm and became invalid
};

/// Writes a depth PNG. When any pixel had to be clamped a sidecar text
/// file "<path>.saturation.txt" records the counts.
DepthWriteResult save_depth(const std::filesystem::path& path, const DepthMap& depth);
DepthMap load_depth(const std::filesystem::path& path);

/// Dataset directory layout:
///   intrinsics.txt   fx fy cx cy width height
///   poses.txt        one row-major 4x4 camera-to-world matrix per line
///   images/000000.png ...   8-bit color
///   depth/000000.png  ...   16-bit depth (optional directory)
void save_sequence(const std::filesystem::path& directory, const Sequence& sequence);
/// Image width and height must be divisible by 64.
Sequence load_sequence(const std::filesystem::path& directory, bool require_depth = true);

/// Loads every sequence directory below root (a directory that itself holds
/// intrinsics.txt is loaded as a single sequence). Sorted by name.
std::vector<Sequence> load_dataset(const std::filesystem::path& root, bool require_depth = true);

std::string frame_file_name(std::size_t index);

/// Stacks images of equal size into a normalized [B, 3, H, W] tensor.
Tensor images_to_tensor(const std::vector<const RgbImage*>& images);

}  // namespace dvmvs
