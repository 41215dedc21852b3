#include "dvmvs/cost_volume.hpp"

#include <array>
#include <cmath>

namespace dvmvs {

namespace {

struct Taps {
  std::array<std::size_t, 4> index{};
  std::array<double, 4> weight{};
  int count = 0;
};

// Bilinear taps with zero padding; matches grid_sample_bilinear.
Taps bilinear_taps(double gx, double gy, int width, int height) {
  Taps taps;
  if (!std::isfinite(gx) || !std::isfinite(gy)) return taps;
  const double fx = std::floor(gx);
  const double fy = std::floor(gy);
  if (fx < -1.0 || fy < -1.0 || fx > width || fy > height) return taps;
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  const double ax = gx - fx;
  const double ay = gy - fy;
  const int xs[2] = {x0, x0 + 1};
  const int ys[2] = {y0, y0 + 1};
  const double wx[2] = {1.0 - ax, ax};
  const double wy[2] = {1.0 - ay, ay};
  for (int j = 0; j < 2; ++j) {
    if (ys[j] < 0 || ys[j] >= height) continue;
    for (int i = 0; i < 2; ++i) {
      if (xs[i] < 0 || xs[i] >= width) continue;
      const double w = wx[i] * wy[j];
      if (w == 0.0) continue;
      taps.index[taps.count] = static_cast<std::size_t>(ys[j]) * width + xs[i];
      taps.weight[taps.count] = w;
      ++taps.count;
    }
  }
  return taps;
}

}  // namespace

Tensor correlation_volume(const Tensor& ref, const Tensor& meas,
                          const std::vector<double>& grids, int plane_count) {
  if (ref.rank() != 4 || ref.shape() != meas.shape()) {
    throw ContractViolation("correlation_volume: reference and measurement shapes differ");
  }
  const int batch = ref.dim(0);
  const int channels = ref.dim(1);
  const int height = ref.dim(2);
  const int width = ref.dim(3);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (grids.size() != static_cast<std::size_t>(batch) * plane_count * plane * 2) {
    throw ContractViolation("correlation_volume: grid size mismatch");
  }
  const double scale = -1.0 / channels;
  const auto rv = ref.values();
  const auto mv = meas.values();
  std::vector<double> out(static_cast<std::size_t>(batch) * plane_count * plane, 0.0);
  for (int b = 0; b < batch; ++b) {
    const double* rb = rv.data() + static_cast<std::size_t>(b) * channels * plane;
    const double* mb = mv.data() + static_cast<std::size_t>(b) * channels * plane;
    for (int m = 0; m < plane_count; ++m) {
      const std::size_t slab = static_cast<std::size_t>(b) * plane_count + m;
      const double* grid = grids.data() + slab * plane * 2;
      for (std::size_t p = 0; p < plane; ++p) {
        const Taps taps = bilinear_taps(grid[2 * p], grid[2 * p + 1], width, height);
        if (taps.count == 0) continue;
        double acc = 0.0;
        for (int c = 0; c < channels; ++c) {
          const double* mc = mb + static_cast<std::size_t>(c) * plane;
          double warped = 0.0;
          for (int k = 0; k < taps.count; ++k) warped += taps.weight[k] * mc[taps.index[k]];
          acc += rb[static_cast<std::size_t>(c) * plane + p] * warped;
        }
        out[slab * plane + p] = scale * acc;
      }
    }
  }
  return Tensor::make_result(
      {batch, plane_count, height, width}, std::move(out), {ref, meas},
      [=](TensorNode& self) {
        double* gref = self.input_grad(0);
        double* gmeas = self.input_grad(1);
        const auto& rv = self.input_value(0);
        const auto& mv = self.input_value(1);
        for (int b = 0; b < batch; ++b) {
          const std::size_t base = static_cast<std::size_t>(b) * channels * plane;
          for (int m = 0; m < plane_count; ++m) {
            const std::size_t slab = static_cast<std::size_t>(b) * plane_count + m;
            const double* grid = grids.data() + slab * plane * 2;
            for (std::size_t p = 0; p < plane; ++p) {
              const double dv = self.grad[slab * plane + p] * scale;
              if (dv == 0.0) continue;
              const Taps taps = bilinear_taps(grid[2 * p], grid[2 * p + 1], width, height);
              for (int c = 0; c < channels; ++c) {
                const std::size_t cp = base + static_cast<std::size_t>(c) * plane;
                if (gref) {
                  double warped = 0.0;
                  for (int k = 0; k < taps.count; ++k)
                    warped += taps.weight[k] * mv[cp + taps.index[k]];
                  gref[cp + p] += dv * warped;
                }
                if (gmeas) {
                  const double r = dv * rv[cp + p];
                  for (int k = 0; k < taps.count; ++k)
                    gmeas[cp + taps.index[k]] += r * taps.weight[k];
                }
              }
            }
          }
        }
      });
}

CostVolume build_cost_volume(const FeatureMap& ref, const FeatureMap& meas,
                             const PlaneHypotheses& planes) {
  if (ref.data.rank() != 4 || ref.data.shape() != meas.data.shape()) {
    throw ContractViolation("build_cost_volume: feature map shapes differ");
  }
  const int batch = ref.data.dim(0);
  if (static_cast<int>(ref.poses.size()) != batch ||
      static_cast<int>(meas.poses.size()) != batch) {
    throw ContractViolation("build_cost_volume: one pose per batch entry required");
  }
  if (ref.intrinsics.width != ref.data.dim(3) || ref.intrinsics.height != ref.data.dim(2)) {
    throw ContractViolation("build_cost_volume: intrinsics do not match feature resolution");
  }
  const int count = static_cast<int>(planes.size());
  const std::size_t grid_size =
      static_cast<std::size_t>(ref.data.dim(2)) * ref.data.dim(3) * 2;
  std::vector<double> grids;
  grids.reserve(static_cast<std::size_t>(batch) * count * grid_size);
  for (int b = 0; b < batch; ++b) {
    const Pose meas_from_ref = relative_pose(meas.poses[b], ref.poses[b]);
    for (int m = 0; m < count; ++m) {
      const auto g = planesweep_grid(ref.intrinsics, meas_from_ref, planes.depths[m]);
      grids.insert(grids.end(), g.begin(), g.end());
    }
  }
  return {correlation_volume(ref.data, meas.data, grids, count), planes};
}

CostVolume average_cost_volumes(const std::vector<CostVolume>& volumes) {
  if (volumes.empty()) throw ContractViolation("average_cost_volumes: empty list");
  const auto& first = volumes.front();
  for (const auto& v : volumes) {
    if (v.data.shape() != first.data.shape() || v.planes.depths != first.planes.depths) {
      throw ContractViolation("average_cost_volumes: volumes disagree in shape or planes");
    }
  }
  if (volumes.size() == 1) return first;
  Tensor total = volumes.front().data;
  for (std::size_t i = 1; i < volumes.size(); ++i) total = add(total, volumes[i].data);
  return {mul_scalar(total, 1.0 / static_cast<double>(volumes.size())), first.planes};
}

}  // namespace dvmvs
