#pragma once

#include <vector>

#include "dvmvs/geometry.hpp"
#include "dvmvs/tensor.hpp"

namespace dvmvs {

inline constexpr int kFeatureChannels = 32;

/// Half-resolution feature map of one image together with its camera.
struct FeatureMap {
  Tensor data;  // [B, CH, H/2, W/2]
  std::vector<Pose> poses;  // one per batch entry
  CameraIntrinsics intrinsics;  // at the feature map's resolution
};

struct CostVolume {
  Tensor data;  // [B, M, H/2, W/2]
  PlaneHypotheses planes;
};

/// Negative feature correlation over plane-swept measurement features:
/// V[b, m, y, x] = -<ref[b, :, y, x], warp_m(meas)[b, :, y, x]> / CH.
/// Out-of-frustum samples are zero and so contribute zero cost.
CostVolume build_cost_volume(const FeatureMap& ref, const FeatureMap& meas,
                             const PlaneHypotheses& planes);

/// Same computation from explicit sampling grids [B, M, h, w, 2]. Exposed so
/// the fused kernel can be checked against a composition of primitives.
Tensor correlation_volume(const Tensor& ref, const Tensor& meas,
                          const std::vector<double>& grids, int plane_count);

/// Elementwise mean of volumes sharing shape and planes.
CostVolume average_cost_volumes(const std::vector<CostVolume>& volumes);

}  // namespace dvmvs
