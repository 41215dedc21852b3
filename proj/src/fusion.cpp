#include "dvmvs/fusion.hpp"

#include <stdexcept>

namespace dvmvs {

namespace {

constexpr int kBottleneckFactor = 32;

void check_measurements(const EncodedView& reference,
                        const std::vector<const EncodedView*>& measurements) {
  if (measurements.empty()) throw ContractViolation("at least one measurement view required");
  for (const auto* m : measurements) {
    if (m == nullptr || m->view.image.shape() != reference.view.image.shape()) {
      throw ContractViolation("measurement view does not match the reference");
    }
  }
}

}  // namespace

const char* to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::kPair: return "pair";
    case FusionMode::kNaive: return "naive";
    case FusionMode::kWarped: return "warped";
  }
  return "?";
}

FusionMode parse_fusion_mode(const std::string& text) {
  if (text == "pair") return FusionMode::kPair;
  if (text == "naive") return FusionMode::kNaive;
  if (text == "warped") return FusionMode::kWarped;
  throw std::invalid_argument("unknown fusion mode '" + text + "'");
}

FeatureMap EncodedView::half_features() const {
  return {pyramid.levels.at(0), view.poses, view.intrinsics.downscaled(2)};
}

EncodedView encode_view(const VideoDepthModel& model, const View& view) {
  check_network_input(view.image);
  if (static_cast<int>(view.poses.size()) != view.image.dim(0)) {
    throw ContractViolation("encode_view: one pose per batch entry required");
  }
  if (view.intrinsics.width != view.image.dim(3) || view.intrinsics.height != view.image.dim(2)) {
    throw ContractViolation("encode_view: intrinsics do not match the image size");
  }
  return {view, model.network().extract_features(view.image)};
}

CostVolume measurement_cost_volume(const VideoDepthModel& model, const EncodedView& reference,
                                   const std::vector<const EncodedView*>& measurements) {
  check_measurements(reference, measurements);
  const PlaneHypotheses planes = model.planes();
  const FeatureMap ref = reference.half_features();
  std::vector<CostVolume> volumes;
  volumes.reserve(measurements.size());
  for (const auto* m : measurements) {
    volumes.push_back(build_cost_volume(ref, m->half_features(), planes));
  }
  return average_cost_volumes(volumes);
}

StepResult pair_step(const VideoDepthModel& model, const EncodedView& reference,
                     const std::vector<const EncodedView*>& measurements) {
  const CostVolume volume = measurement_cost_volume(model, reference, measurements);
  const EncoderOutput encoded =
      model.network().encode(volume, reference.pyramid, reference.view.image);
  StepResult result;
  result.output = model.network().decode(encoded.bottleneck, encoded.skips,
                                         reference.view.image, model.config().range);
  return result;
}

namespace {

RecurrentState initial_state(const VideoDepthModel& model, const Tensor& bottleneck) {
  return zero_state(model.cell().config(), bottleneck.dim(0), bottleneck.dim(2),
                    bottleneck.dim(3));
}

StepResult run_cell(const VideoDepthModel& model, const EncodedView& reference,
                    const EncoderOutput& encoded, RecurrentState previous) {
  StepResult result;
  result.state = model.cell().step(encoded.bottleneck, previous);
  result.state.poses = reference.view.poses;
  result.state.intrinsics = reference.view.intrinsics;
  result.output = model.network().decode(result.state.hidden, encoded.skips,
                                         reference.view.image, model.config().range);
  return result;
}

}  // namespace

StepResult naive_fusion_step(const VideoDepthModel& model, const EncodedView& reference,
                             const std::vector<const EncodedView*>& measurements,
                             const RecurrentState& previous) {
  const CostVolume volume = measurement_cost_volume(model, reference, measurements);
  const EncoderOutput encoded =
      model.network().encode(volume, reference.pyramid, reference.view.image);
  RecurrentState state = previous.empty() ? initial_state(model, encoded.bottleneck) : previous;
  if (state.hidden.shape() != encoded.bottleneck.shape()) {
    throw ContractViolation("naive_fusion_step: state " + shape_string(state.hidden.shape()) +
                            " does not match bottleneck " +
                            shape_string(encoded.bottleneck.shape()));
  }
  return run_cell(model, reference, encoded, std::move(state));
}

Tensor propagate_hidden(const Prior& prior, const std::vector<Pose>& current_poses,
                        const CameraIntrinsics& intrinsics, const WarpOptions& options) {
  const CameraIntrinsics bottleneck = intrinsics.downscaled(kBottleneckFactor);
  const RecurrentState& state = prior.state;
  PartialDepth partial;
  if (options.source == WarpSource::kGroundtruth) {
    if (options.groundtruth == nullptr ||
        options.groundtruth->size() != current_poses.size()) {
      throw ContractViolation("fused_step: groundtruth warping needs one depth map per entry");
    }
    std::vector<DepthMap> coarse;
    for (const auto& gt : *options.groundtruth) {
      coarse.push_back(downsample_nearest(gt, kBottleneckFactor));
    }
    partial = partial_depth_from(coarse);
  } else {
    if (!prior.depth.defined()) {
      throw ContractViolation("fused_step: prediction warping needs the previous depth");
    }
    if (prior.depth_poses.size() != state.poses.size()) {
      throw ContractViolation("fused_step: previous prediction and state batch differ");
    }
    for (std::size_t b = 0; b < state.poses.size(); ++b) {
      if (prior.depth_poses[b].matrix() != state.poses[b].matrix()) {
        throw ContractViolation(
            "fused_step: previous prediction was made under a different pose than the state");
      }
    }
    const Tensor source =
        options.block_gradient ? stop_gradient(prior.depth) : prior.depth;
    partial = render_partial_depth(subsample_nearest(source, kBottleneckFactor), state.poses,
                                   current_poses, bottleneck);
  }
  return warp_hidden(state.hidden, partial, state.poses, current_poses, bottleneck);
}

StepResult fused_step(const VideoDepthModel& model, const EncodedView& reference,
                      const std::vector<const EncodedView*>& measurements, const Prior& prior,
                      const WarpOptions& options) {
  const CostVolume volume = measurement_cost_volume(model, reference, measurements);
  const EncoderOutput encoded =
      model.network().encode(volume, reference.pyramid, reference.view.image);
  if (prior.state.empty()) {
    return run_cell(model, reference, encoded, initial_state(model, encoded.bottleneck));
  }
  if (prior.state.hidden.shape() != encoded.bottleneck.shape() ||
      prior.state.poses.size() != reference.view.poses.size()) {
    throw ContractViolation("fused_step: previous state does not match the current batch");
  }
  RecurrentState warped = prior.state;
  warped.hidden = propagate_hidden(prior, reference.view.poses, reference.view.intrinsics,
                                   options);
  return run_cell(model, reference, encoded, std::move(warped));
}

}  // namespace dvmvs
