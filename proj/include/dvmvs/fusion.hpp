#pragma once

#include <vector>

#include "dvmvs/model.hpp"
#include "dvmvs/state_propagation.hpp"

namespace dvmvs {

enum class FusionMode { kPair, kNaive, kWarped };
enum class WarpSource { kPrediction, kGroundtruth };

const char* to_string(FusionMode mode);
FusionMode parse_fusion_mode(const std::string& text);

/// A batch of posed images sharing one camera model.
struct View {
  Tensor image;                 // [B, 3, H, W]
  std::vector<Pose> poses;
  CameraIntrinsics intrinsics;  // full resolution
};

/// A view together with its feature pyramid, computed once and reused both
/// as reference and as measurement.
struct EncodedView {
  View view;
  FeaturePyramid pyramid;

  FeatureMap half_features() const;
};

EncodedView encode_view(const VideoDepthModel& model, const View& view);

/// Builds one cost volume per measurement and averages them.
CostVolume measurement_cost_volume(const VideoDepthModel& model, const EncodedView& reference,
                                   const std::vector<const EncodedView*>& measurements);

struct StepResult {
  DecoderOutput output;
  RecurrentState state;  // empty for the pair network
};

/// Pair network: encode the cost volume, decode the bottleneck directly.
StepResult pair_step(const VideoDepthModel& model, const EncodedView& reference,
                     const std::vector<const EncodedView*>& measurements);

/// Cell over the unwarped previous state. An empty previous state starts
/// from zeros.
StepResult naive_fusion_step(const VideoDepthModel& model, const EncodedView& reference,
                             const std::vector<const EncodedView*>& measurements,
                             const RecurrentState& previous);

/// What the fused step knows about the previous time step.
struct Prior {
  RecurrentState state;
  /// Previous full-resolution depth prediction [B,1,H,W] and the poses it
  /// was predicted under. Used when warping from predictions.
  Tensor depth;
  std::vector<Pose> depth_poses;
};

struct WarpOptions {
  WarpSource source = WarpSource::kPrediction;
  /// Current-view groundtruth, one per batch entry, for kGroundtruth.
  const std::vector<DepthMap>* groundtruth = nullptr;
  /// Blocks gradients into the depth used for warping.
  bool block_gradient = true;
};

/// Propagates the previous hidden state into the current view (through a
/// rendered depth proxy or the current groundtruth), then runs the cell and
/// decoder. The cell state is carried over unwarped.
StepResult fused_step(const VideoDepthModel& model, const EncodedView& reference,
                      const std::vector<const EncodedView*>& measurements, const Prior& prior,
                      const WarpOptions& options);

/// Warped hidden state used by fused_step, exposed for inspection.
Tensor propagate_hidden(const Prior& prior, const std::vector<Pose>& current_poses,
                        const CameraIntrinsics& intrinsics, const WarpOptions& options);

}  // namespace dvmvs
