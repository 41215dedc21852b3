#pragma once

#include <cstdint>
#include <vector>

#include "dvmvs/depth_map.hpp"
#include "dvmvs/geometry.hpp"
#include "dvmvs/tensor.hpp"

namespace dvmvs {

/// Depth proxy of the current view at bottleneck resolution.
/// depth is [B, 1, h, w]; uncovered pixels hold 0 and covered[i] == 0.
struct PartialDepth {
  Tensor depth;
  std::vector<std::uint8_t> covered;

  std::size_t covered_count() const;
};

/// Picks the sample nearest to each coarse pixel centre of a [B,C,H,W]
/// tensor; gradients flow back to the picked samples.
Tensor subsample_nearest(const Tensor& x, int factor);

/// Splats the previous view's depth (bottleneck resolution, [B,1,h,w]) into
/// the current camera: every valid pixel is unprojected, moved into the
/// current frame, and written to its nearest pixel; collisions keep the
/// smallest depth. Differentiable in the splatted depth values for a fixed
/// splat assignment. Pixels with depth <= 0 are treated as invalid.
PartialDepth render_partial_depth(const Tensor& previous_depth,
                                  const std::vector<Pose>& previous_poses,
                                  const std::vector<Pose>& current_poses,
                                  const CameraIntrinsics& bottleneck_intrinsics);

/// Single-view convenience form; the DepthMap validity mask is honoured.
PartialDepth render_partial_depth(const DepthMap& previous_depth, const Pose& previous_pose,
                                  const Pose& current_pose,
                                  const CameraIntrinsics& bottleneck_intrinsics);

/// Treats a depth map of the current view (e.g. groundtruth) as the proxy:
/// covered wherever valid and positive.
PartialDepth partial_depth_from(const std::vector<DepthMap>& current_depth);

/// For every covered current pixel, the coordinate in the previous view of
/// the point at the proxy depth. Uncovered pixels and points behind the
/// previous camera map far out of bounds. [B, h, w, 2], differentiable in
/// the proxy depth.
Tensor warp_grid(const PartialDepth& partial, const std::vector<Pose>& previous_poses,
                 const std::vector<Pose>& current_poses,
                 const CameraIntrinsics& bottleneck_intrinsics);

/// Bilinearly resamples the previous hidden state into the current view.
/// Holes read as zero.
Tensor warp_hidden(const Tensor& previous_hidden, const PartialDepth& partial,
                   const std::vector<Pose>& previous_poses,
                   const std::vector<Pose>& current_poses,
                   const CameraIntrinsics& bottleneck_intrinsics);

}  // namespace dvmvs
