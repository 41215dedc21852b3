#pragma once

#include <cstdint>
#include <vector>

namespace dvmvs {

/// Row-major depth in meters with a per-pixel validity flag.
struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<double> values;
  std::vector<std::uint8_t> valid;

  DepthMap() = default;
  DepthMap(int w, int h, double fill = 0.0, bool is_valid = false)
      : width(w),
        height(h),
        values(static_cast<std::size_t>(w) * h, fill),
        valid(static_cast<std::size_t>(w) * h, is_valid ? 1 : 0) {}

  std::size_t size() const { return values.size(); }
  double& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  bool is_valid(int x, int y) const { return valid[static_cast<std::size_t>(y) * width + x] != 0; }
};

/// Picks the sample nearest to each coarse pixel centre; the coarse pixel
/// is invalid when that sample is. factor must divide both dimensions.
DepthMap downsample_nearest(const DepthMap& depth, int factor);

/// Nearest-neighbour enlargement by an integer factor.
DepthMap upsample_nearest(const DepthMap& depth, int factor);

}  // namespace dvmvs
