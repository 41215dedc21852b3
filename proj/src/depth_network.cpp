#include "dvmvs/depth_network.hpp"

#include <string>

namespace dvmvs {

namespace {

constexpr int kExtractorWidths[kPyramidLevels] = {16, 24, 32, 48, 64};
constexpr int kEncoderStageWidths[4] = {16, 24, 32, 64};
constexpr int kEncoderDownWidths[4] = {24, 32, 64, kBottleneckChannels};
constexpr int kDecoderWidths[4] = {64, 32, 24, 16};
constexpr int kRefineWidth = 8;

Tensor elu_norm(const Tensor& x) { return layer_norm_spatial(elu(x)); }

}  // namespace

Tensor sigmoid_to_inverse_depth(const Tensor& s, const DepthRange& range) {
  const double span = 1.0 / range.near - 1.0 / range.far;
  return add_scalar(mul_scalar(s, span), 1.0 / range.far);
}

DepthRegression regress_depth(const Tensor& encoding, const Conv2d& regression,
                              const DepthRange& range) {
  const Tensor inverse = sigmoid_to_inverse_depth(sigmoid(regression(encoding)), range);
  return {inverse, reciprocal(inverse)};
}

void check_network_input(const Tensor& image) {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw ContractViolation("network input must be [B,3,H,W], got " +
                            shape_string(image.shape()));
  }
  if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0) {
    throw ContractViolation("network input size " + std::to_string(image.dim(3)) + "x" +
                            std::to_string(image.dim(2)) + " is not divisible by 32");
  }
}

// ---------------------------------------------------------------------------

FeatureExtractor::FeatureExtractor(std::mt19937_64& rng) {
  int in = 3;
  for (int width : kExtractorWidths) {
    stages_.emplace_back(in, width, 3, 2, true, rng);
    lateral_.emplace_back(width, kFeatureChannels, 1, 1, true, rng);
    smooth_.emplace_back(kFeatureChannels, kFeatureChannels, 3, 1, true, rng);
    in = width;
  }
}

FeaturePyramid FeatureExtractor::operator()(const Tensor& image) const {
  check_network_input(image);
  std::vector<Tensor> bottom_up;
  Tensor x = image;
  for (const auto& stage : stages_) {
    x = elu(stage(x));
    bottom_up.push_back(x);
  }
  std::vector<Tensor> merged(kPyramidLevels);
  merged[kPyramidLevels - 1] = lateral_[kPyramidLevels - 1](bottom_up.back());
  for (int level = kPyramidLevels - 2; level >= 0; --level) {
    merged[level] = add(lateral_[level](bottom_up[level]),
                        upsample_nearest2x(merged[level + 1]));
  }
  FeaturePyramid pyramid;
  for (int level = 0; level < kPyramidLevels; ++level) {
    pyramid.levels.push_back(smooth_[level](merged[level]));
  }
  return pyramid;
}

void FeatureExtractor::collect(ParameterList& out) {
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    stages_[i].collect("extractor.stage" + std::to_string(i), out);
  }
  for (std::size_t i = 0; i < lateral_.size(); ++i) {
    lateral_[i].collect("fpn.lateral" + std::to_string(i), out);
    smooth_[i].collect("fpn.smooth" + std::to_string(i), out);
  }
}

// ---------------------------------------------------------------------------

CostEncoder::CostEncoder(int plane_count, std::mt19937_64& rng) {
  int in = plane_count + kFeatureChannels + 3;
  for (int i = 0; i < 4; ++i) {
    stages_.emplace_back(in, kEncoderStageWidths[i], 3, 1, true, rng);
    down_.emplace_back(kEncoderStageWidths[i], kEncoderDownWidths[i], 3, 2, true, rng);
    in = kEncoderDownWidths[i] + kFeatureChannels;
  }
  bottleneck_ = Conv2d(in, kBottleneckChannels, 3, 1, true, rng);
}

EncoderOutput CostEncoder::operator()(const CostVolume& volume,
                                      const FeaturePyramid& pyramid,
                                      const Tensor& image_half) const {
  if (pyramid.levels.size() != kPyramidLevels) {
    throw ContractViolation("encode: pyramid must have 5 levels");
  }
  EncoderOutput out;
  Tensor x = concat_channels({volume.data, pyramid.levels[0], image_half});
  for (int i = 0; i < 4; ++i) {
    if (i > 0) x = concat_channels({x, pyramid.levels[i]});
    const Tensor skip = elu_norm(stages_[i](x));
    out.skips.push_back(skip);
    x = elu_norm(down_[i](skip));
  }
  out.bottleneck = elu(bottleneck_(concat_channels({x, pyramid.levels[4]})));
  return out;
}

void CostEncoder::collect(ParameterList& out) {
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    stages_[i].collect("encoder.stage" + std::to_string(i), out);
    down_[i].collect("encoder.down" + std::to_string(i), out);
  }
  bottleneck_.collect("encoder.bottleneck", out);
}

// ---------------------------------------------------------------------------

DepthDecoder::DepthDecoder(std::mt19937_64& rng) {
  // Skip widths in decoder order (1/16 first).
  const int skip_widths[4] = {kEncoderStageWidths[3], kEncoderStageWidths[2],
                              kEncoderStageWidths[1], kEncoderStageWidths[0]};
  int previous = kBottleneckChannels;
  for (int i = 0; i < 4; ++i) {
    const int in = previous + (i > 0 ? 1 : 0) + skip_widths[i];
    blocks_.emplace_back(in, kDecoderWidths[i], 3, 1, true, rng);
    regression_.emplace_back(kDecoderWidths[i], 1, 3, 1, true, rng);
    previous = kDecoderWidths[i];
  }
  refine_a_ = Conv2d(previous + 1 + 3, kRefineWidth, 3, 1, true, rng);
  refine_b_ = Conv2d(kRefineWidth, kRefineWidth, 3, 1, true, rng);
  refine_regression_ = Conv2d(kRefineWidth, 1, 3, 1, true, rng);
}

DecoderOutput DepthDecoder::operator()(const Tensor& bottleneck,
                                       const std::vector<Tensor>& skips,
                                       const Tensor& image,
                                       const DepthRange& range) const {
  if (skips.size() != 4) throw ContractViolation("decode: expected 4 skip tensors");
  if (bottleneck.rank() != 4 || bottleneck.dim(1) != kBottleneckChannels) {
    throw ContractViolation("decode: bottleneck must have 128 channels, got " +
                            shape_string(bottleneck.shape()));
  }
  DecoderOutput out;
  Tensor y = bottleneck;
  Tensor s;
  for (int i = 0; i < 4; ++i) {
    const Tensor& skip = skips[static_cast<std::size_t>(3 - i)];
    std::vector<Tensor> parts{upsample_bilinear2x(y)};
    if (i > 0) parts.push_back(upsample_bilinear2x(s));
    parts.push_back(skip);
    y = elu(blocks_[i](concat_channels(parts)));
    s = sigmoid(regression_[i](y));
    out.encodings.push_back(y);
    out.inverse_depths.push_back(sigmoid_to_inverse_depth(s, range));
  }
  const DepthRegression full = refine(y, s, image, range);
  out.inverse_depths.push_back(full.inverse_depth);
  out.depth = full.depth;
  return out;
}

DepthRegression DepthDecoder::refine(const Tensor& half_encoding,
                                     const Tensor& half_sigmoid, const Tensor& image,
                                     const DepthRange& range) const {
  Tensor x = concat_channels(
      {upsample_bilinear2x(half_encoding), upsample_bilinear2x(half_sigmoid), image});
  x = elu(refine_a_(x));
  x = elu(refine_b_(x));
  return regress_depth(x, refine_regression_, range);
}

void DepthDecoder::collect(ParameterList& out) {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect("decoder.block" + std::to_string(i), out);
    regression_[i].collect("decoder.regression" + std::to_string(i), out);
  }
  refine_a_.collect("decoder.refine_a", out);
  refine_b_.collect("decoder.refine_b", out);
  refine_regression_.collect("decoder.refine_regression", out);
}

// ---------------------------------------------------------------------------

PairNetwork::PairNetwork(int plane_count, std::mt19937_64& rng)
    : extractor_(rng), encoder_(plane_count, rng), decoder_(rng) {}

FeaturePyramid PairNetwork::extract_features(const Tensor& image) const {
  return extractor_(image);
}

EncoderOutput PairNetwork::encode(const CostVolume& volume, const FeaturePyramid& pyramid,
                                  const Tensor& image) const {
  check_network_input(image);
  return encoder_(volume, pyramid, downsample2x(image));
}

DecoderOutput PairNetwork::decode(const Tensor& bottleneck,
                                  const std::vector<Tensor>& skips, const Tensor& image,
                                  const DepthRange& range) const {
  return decoder_(bottleneck, skips, image, range);
}

void PairNetwork::collect(ParameterList& out) {
  extractor_.collect(out);
  encoder_.collect(out);
  decoder_.collect(out);
}

// ---------------------------------------------------------------------------

Tensor multiscale_loss(const std::vector<Tensor>& inverse_depths,
                       const std::vector<DepthMap>& groundtruth) {
  if (inverse_depths.empty()) throw ContractViolation("multiscale_loss: no predictions");
  Tensor total;
  for (const Tensor& prediction : inverse_depths) {
    if (prediction.rank() != 4 || prediction.dim(1) != 1 ||
        prediction.dim(0) != static_cast<int>(groundtruth.size())) {
      throw ContractViolation("multiscale_loss: prediction " +
                              shape_string(prediction.shape()) +
                              " does not match groundtruth batch");
    }
    const int h = prediction.dim(2);
    const int w = prediction.dim(3);
    std::vector<double> target;
    std::vector<double> mask;
    target.reserve(prediction.numel());
    mask.reserve(prediction.numel());
    for (const DepthMap& gt : groundtruth) {
      if (gt.width % w != 0 || gt.height % h != 0 || gt.width / w != gt.height / h) {
        throw ContractViolation("multiscale_loss: groundtruth size incompatible");
      }
      const DepthMap coarse = downsample_nearest(gt, gt.width / w);
      for (std::size_t i = 0; i < coarse.size(); ++i) {
        const bool ok = coarse.valid[i] != 0 && coarse.values[i] > 0.0;
        target.push_back(ok ? 1.0 / coarse.values[i] : 0.0);
        mask.push_back(ok ? 1.0 : 0.0);
      }
    }
    const Tensor term = masked_mean_abs_diff(prediction, target, mask);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

std::vector<DepthMap> to_depth_maps(const Tensor& depth) {
  if (depth.rank() != 4 || depth.dim(1) != 1) {
    throw ContractViolation("to_depth_maps: expected [B,1,H,W]");
  }
  std::vector<DepthMap> maps;
  const int h = depth.dim(2);
  const int w = depth.dim(3);
  const std::size_t n = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < depth.dim(0); ++b) {
    DepthMap map(w, h, 0.0, true);
    std::copy_n(depth.values().begin() + b * n, n, map.values.begin());
    maps.push_back(std::move(map));
  }
  return maps;
}

}  // namespace dvmvs
