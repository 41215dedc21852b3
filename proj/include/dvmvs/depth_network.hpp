#pragma once

#include <random>
#include <vector>

#include "dvmvs/cost_volume.hpp"
#include "dvmvs/depth_map.hpp"
#include "dvmvs/layers.hpp"

namespace dvmvs {

struct DepthRange {
  double near = kDefaultNear;
  double far = kDefaultFar;
};

/// Number of channels at the 1/32 bottleneck, shared by the encoder output
/// and the recurrent state.
inline constexpr int kBottleneckChannels = 128;
inline constexpr int kPyramidLevels = 5;

/// Feature maps at 1/2, 1/4, 1/8, 1/16 and 1/32 of the input size, each with
/// kFeatureChannels channels. levels[0] is the finest.
struct FeaturePyramid {
  std::vector<Tensor> levels;
};

struct EncoderOutput {
  Tensor bottleneck;           // [B, 128, H/32, W/32]
  std::vector<Tensor> skips;   // at 1/2, 1/4, 1/8, 1/16
};

struct DecoderOutput {
  std::vector<Tensor> encodings;       // Y at 1/16, 1/8, 1/4, 1/2
  std::vector<Tensor> inverse_depths;  // at 1/16, 1/8, 1/4, 1/2, 1/1
  Tensor depth;                        // [B, 1, H, W] meters
};

/// Maps a sigmoid output s in [0, 1] to inverse depth
/// (1/near - 1/far) * s + 1/far.
Tensor sigmoid_to_inverse_depth(const Tensor& s, const DepthRange& range);

struct DepthRegression {
  Tensor inverse_depth;
  Tensor depth;
};

/// s = sigmoid(conv(encoding)), then the inverse-depth mapping above.
DepthRegression regress_depth(const Tensor& encoding, const Conv2d& regression,
                              const DepthRange& range);

/// Toy replacement of the backbone: five stride-2 stages (16, 24, 32, 48 and
/// 64 channels) followed by a top-down pyramid that merges every level to
/// 32 channels.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  explicit FeatureExtractor(std::mt19937_64& rng);
  FeaturePyramid operator()(const Tensor& image) const;
  void collect(ParameterList& out);

 private:
  std::vector<Conv2d> stages_;
  std::vector<Conv2d> lateral_;
  std::vector<Conv2d> smooth_;
};

/// U-Net encoder over the cost volume; every stage sees the matching
/// pyramid level (multi-skip design).
class CostEncoder {
 public:
  CostEncoder() = default;
  CostEncoder(int plane_count, std::mt19937_64& rng);
  EncoderOutput operator()(const CostVolume& volume, const FeaturePyramid& pyramid,
                           const Tensor& image_half) const;
  void collect(ParameterList& out);

 private:
  std::vector<Conv2d> stages_;  // at 1/2 .. 1/16, stride 1
  std::vector<Conv2d> down_;    // stride 2 into the next scale
  Conv2d bottleneck_;
};

/// Decoder blocks at 1/16 .. 1/2 plus the full-resolution refinement.
class DepthDecoder {
 public:
  DepthDecoder() = default;
  explicit DepthDecoder(std::mt19937_64& rng);
  DecoderOutput operator()(const Tensor& bottleneck, const std::vector<Tensor>& skips,
                           const Tensor& image, const DepthRange& range) const;
  void collect(ParameterList& out);

  /// Two convolutions over [upsampled encoding, upsampled sigmoid map,
  /// image] then depth regression at full resolution.
  DepthRegression refine(const Tensor& half_encoding, const Tensor& half_sigmoid,
                         const Tensor& image, const DepthRange& range) const;

 private:
  std::vector<Conv2d> blocks_;
  std::vector<Conv2d> regression_;
  Conv2d refine_a_;
  Conv2d refine_b_;
  Conv2d refine_regression_;
};

/// Everything but the recurrent cell. Parameter names are prefixed with
/// "extractor."/"fpn." (feature extraction), "encoder." and "decoder.".
class PairNetwork {
 public:
  PairNetwork() = default;
  PairNetwork(int plane_count, std::mt19937_64& rng);

  FeaturePyramid extract_features(const Tensor& image) const;
  EncoderOutput encode(const CostVolume& volume, const FeaturePyramid& pyramid,
                       const Tensor& image) const;
  DecoderOutput decode(const Tensor& bottleneck, const std::vector<Tensor>& skips,
                       const Tensor& image, const DepthRange& range) const;

  void collect(ParameterList& out);

 private:
  FeatureExtractor extractor_;
  CostEncoder encoder_;
  DepthDecoder decoder_;
};

/// Validates that an image tensor is [B, 3, H, W] with H, W divisible by 32.
void check_network_input(const Tensor& image);

/// Sum over scales of the mean |inv_pred - 1/gt| over valid groundtruth
/// pixels. groundtruth holds one full-resolution map per batch entry; it is
/// reduced to each prediction's resolution by downsample_nearest. A scale
/// without valid pixels contributes zero.
Tensor multiscale_loss(const std::vector<Tensor>& inverse_depths,
                       const std::vector<DepthMap>& groundtruth);

/// Converts a [B,1,H,W] depth tensor into per-batch DepthMaps (all valid).
std::vector<DepthMap> to_depth_maps(const Tensor& depth);

}  // namespace dvmvs
