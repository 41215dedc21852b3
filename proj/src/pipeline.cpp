#include "dvmvs/pipeline.hpp"

#include <algorithm>

namespace dvmvs {

KeyframeBuffer::KeyframeBuffer(std::size_t capacity, double admission_distance)
    : capacity_(capacity), admission_distance_(admission_distance) {
  if (capacity == 0) throw ContractViolation("KeyframeBuffer: capacity must be positive");
}

bool KeyframeBuffer::admits(const Pose& pose) const {
  if (keyframes_.empty()) return true;
  return pose_distance(relative_pose(keyframes_.back().pose, pose)) > admission_distance_;
}

bool KeyframeBuffer::update(std::size_t frame_index, const Pose& pose,
                            std::shared_ptr<const EncodedView> encoded) {
  if (!admits(pose)) return false;
  keyframes_.push_back({frame_index, pose, std::move(encoded)});
  while (keyframes_.size() > capacity_) keyframes_.pop_front();
  return true;
}

std::vector<RankedKeyframe> rank_keyframes(const KeyframeBuffer& buffer, const Pose& current) {
  std::vector<RankedKeyframe> ranked;
  ranked.reserve(buffer.size());
  for (const Keyframe& kf : buffer.keyframes()) {
    ranked.push_back({&kf, keyframe_penalty(relative_pose(current, kf.pose))});
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const RankedKeyframe& a, const RankedKeyframe& b) {
                     return a.penalty < b.penalty;
                   });
  return ranked;
}

std::vector<const Keyframe*> select_measurements(const KeyframeBuffer& buffer,
                                                 const Pose& current, std::size_t k) {
  const auto ranked = rank_keyframes(buffer, current);
  std::vector<const Keyframe*> selected;
  for (std::size_t i = 0; i < ranked.size() && i < k; ++i) selected.push_back(ranked[i].keyframe);
  return selected;
}

OnlineInference::OnlineInference(const VideoDepthModel& model,
                                 const CameraIntrinsics& intrinsics,
                                 const InferenceOptions& options)
    : model_(model), intrinsics_(intrinsics), options_(options) {
  if (options.measurements == 0) {
    throw ContractViolation("OnlineInference: at least one measurement frame required");
  }
}

FrameRecord OnlineInference::process(std::size_t frame_index, const RgbImage& image,
                                     const Pose& pose) {
  NoGradGuard no_grad;
  FrameRecord record;
  record.frame_index = frame_index;
  View view{images_to_tensor({&image}), {pose}, intrinsics_};
  auto encoded = std::make_shared<const EncodedView>(encode_view(model_, view));

  const auto chosen = select_measurements(buffer_, pose, options_.measurements);
  if (chosen.empty()) {
    record.skipped = true;
  } else {
    std::vector<const EncodedView*> measurements;
    for (const Keyframe* kf : chosen) {
      measurements.push_back(kf->encoded.get());
      record.measurement_frames.push_back(kf->frame_index);
    }
    StepResult result;
    switch (options_.mode) {
      case FusionMode::kPair:
        result = pair_step(model_, *encoded, measurements);
        break;
      case FusionMode::kNaive:
        result = naive_fusion_step(model_, *encoded, measurements, state_);
        break;
      case FusionMode::kWarped: {
        const Prior prior{state_, previous_depth_, previous_poses_};
        result = fused_step(model_, *encoded, measurements, prior, WarpOptions{});
        break;
      }
    }
    state_ = result.state;
    previous_depth_ = result.output.depth;
    previous_poses_ = {pose};
    record.depth = to_depth_maps(result.output.depth).front();
  }
  record.keyframe_added = buffer_.update(frame_index, pose, std::move(encoded));
  return record;
}

std::vector<FrameRecord> online_infer(const Sequence& sequence, const VideoDepthModel& model,
                                      const InferenceOptions& options) {
  OnlineInference loop(model, sequence.intrinsics, options);
  std::vector<FrameRecord> records;
  records.reserve(sequence.frames.size());
  for (std::size_t i = 0; i < sequence.frames.size(); ++i) {
    records.push_back(loop.process(i, sequence.frames[i].image, sequence.frames[i].pose));
  }
  return records;
}

}  // namespace dvmvs
