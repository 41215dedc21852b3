#include "dvmvs/depth_map.hpp"

#include "dvmvs/tensor.hpp"

namespace dvmvs {

DepthMap downsample_nearest(const DepthMap& depth, int factor) {
  if (factor <= 0 || depth.width % factor != 0 || depth.height % factor != 0) {
    throw ContractViolation("downsample_nearest: factor does not divide the depth map");
  }
  DepthMap out(depth.width / factor, depth.height / factor);
  const int offset = factor / 2;
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      const int sx = x * factor + offset;
      const int sy = y * factor + offset;
      const std::size_t src = static_cast<std::size_t>(sy) * depth.width + sx;
      const std::size_t dst = static_cast<std::size_t>(y) * out.width + x;
      out.values[dst] = depth.values[src];
      out.valid[dst] = depth.valid[src];
    }
  }
  return out;
}

DepthMap upsample_nearest(const DepthMap& depth, int factor) {
  if (factor <= 0) throw ContractViolation("upsample_nearest: factor must be positive");
  DepthMap out(depth.width * factor, depth.height * factor);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      const std::size_t src = static_cast<std::size_t>(y / factor) * depth.width + x / factor;
      const std::size_t dst = static_cast<std::size_t>(y) * out.width + x;
      out.values[dst] = depth.values[src];
      out.valid[dst] = depth.valid[src];
    }
  }
  return out;
}

}  // namespace dvmvs
