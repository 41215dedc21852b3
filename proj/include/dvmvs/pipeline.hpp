#pragma once

#include <deque>
#include <memory>
#include <vector>

#include "dvmvs/dataset.hpp"
#include "dvmvs/fusion.hpp"

namespace dvmvs {

inline constexpr std::size_t kKeyframeCapacity = 30;
inline constexpr double kKeyframeDistance = 0.1;

struct Keyframe {
  std::size_t frame_index = 0;
  Pose pose;
  /// Cached image features; null when the buffer is used without a model.
  std::shared_ptr<const EncodedView> encoded;
};

/// The most recent keyframes, oldest first.
class KeyframeBuffer {
 public:
  explicit KeyframeBuffer(std::size_t capacity = kKeyframeCapacity,
                          double admission_distance = kKeyframeDistance);

  /// True when the buffer is empty or the pose is farther than the
  /// admission distance from the most recent keyframe.
  bool admits(const Pose& pose) const;

  /// Adds the frame when admitted, evicting the oldest keyframe beyond
  /// capacity. Returns whether it was added.
  bool update(std::size_t frame_index, const Pose& pose,
              std::shared_ptr<const EncodedView> encoded = nullptr);

  const std::deque<Keyframe>& keyframes() const { return keyframes_; }
  std::size_t size() const { return keyframes_.size(); }
  bool empty() const { return keyframes_.empty(); }
  std::size_t capacity() const { return capacity_; }

 private:
  std::size_t capacity_;
  double admission_distance_;
  std::deque<Keyframe> keyframes_;
};

struct RankedKeyframe {
  const Keyframe* keyframe = nullptr;
  double penalty = 0.0;
};

/// Every keyframe with keyframe_penalty(relative_pose(current, keyframe)),
/// ascending; equal penalties keep the older keyframe first.
std::vector<RankedKeyframe> rank_keyframes(const KeyframeBuffer& buffer, const Pose& current);

/// The k best ranked keyframes (fewer when the buffer is smaller). An empty
/// result means no measurement is available.
std::vector<const Keyframe*> select_measurements(const KeyframeBuffer& buffer,
                                                 const Pose& current, std::size_t k);

struct InferenceOptions {
  FusionMode mode = FusionMode::kWarped;
  std::size_t measurements = 1;
};

struct FrameRecord {
  std::size_t frame_index = 0;
  /// No keyframe was available; depth is empty.
  bool skipped = false;
  bool keyframe_added = false;
  std::vector<std::size_t> measurement_frames;
  DepthMap depth;
};

/// Causal per-frame loop: select measurements among earlier keyframes,
/// predict, then offer the frame to the keyframe buffer.
class OnlineInference {
 public:
  OnlineInference(const VideoDepthModel& model, const CameraIntrinsics& intrinsics,
                  const InferenceOptions& options);

  FrameRecord process(std::size_t frame_index, const RgbImage& image, const Pose& pose);

  const KeyframeBuffer& buffer() const { return buffer_; }

 private:
  const VideoDepthModel& model_;
  CameraIntrinsics intrinsics_;
  InferenceOptions options_;
  KeyframeBuffer buffer_;
  RecurrentState state_;
  Tensor previous_depth_;
  std::vector<Pose> previous_poses_;
};

std::vector<FrameRecord> online_infer(const Sequence& sequence, const VideoDepthModel& model,
                                      const InferenceOptions& options);

}  // namespace dvmvs
