#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dvmvs/tensor.hpp"

namespace dvmvs {

/// Handle to a learnable tensor inside a model, addressed by a dotted name
/// such as "encoder.stage1.weight".
struct NamedParameter {
  std::string name;
  Tensor* tensor;
};

using ParameterList = std::vector<NamedParameter>;

/// 3x3 (or other odd-sized) convolution layer with "same"-style padding.
class Conv2d {
 public:
  Conv2d() = default;
  /// Weights drawn from U(-a, a) with a = sqrt(3 / fan_in).
  Conv2d(int in_channels, int out_channels, int kernel, int stride, bool bias,
         std::mt19937_64& rng);

  Tensor operator()(const Tensor& x) const { return conv2d(x, params_); }

  void collect(const std::string& prefix, ParameterList& out);
  const ConvParams& params() const { return params_; }
  ConvParams& params() { return params_; }
  int out_channels() const { return params_.weight.dim(0); }

 private:
  ConvParams params_;
};

}  // namespace dvmvs
