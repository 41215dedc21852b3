#include "dvmvs/layers.hpp"

#include <cmath>

namespace dvmvs {

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride,
               bool bias, std::mt19937_64& rng) {
  if (kernel % 2 == 0) throw ContractViolation("Conv2d: kernel extent must be odd");
  const int fan_in = in_channels * kernel * kernel;
  const double bound = std::sqrt(3.0 / fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(static_cast<std::size_t>(out_channels) * fan_in);
  for (auto& v : w) v = dist(rng);
  params_.weight = Tensor::from({out_channels, in_channels, kernel, kernel},
                                std::move(w), true);
  if (bias) params_.bias = Tensor::zeros({out_channels}, true);
  params_.stride = stride;
  params_.padding = kernel / 2;
}

void Conv2d::collect(const std::string& prefix, ParameterList& out) {
  out.push_back({prefix + ".weight", &params_.weight});
  if (params_.bias.defined()) out.push_back({prefix + ".bias", &params_.bias});
}

}  // namespace dvmvs
