#include "dvmvs/state_propagation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dvmvs {

std::size_t PartialDepth::covered_count() const {
  return static_cast<std::size_t>(std::count(covered.begin(), covered.end(), 1));
}

Tensor subsample_nearest(const Tensor& x, int factor) {
  if (x.rank() != 4 || factor <= 0 || x.dim(2) % factor != 0 || x.dim(3) % factor != 0) {
    throw ContractViolation("subsample_nearest: factor does not divide " +
                            shape_string(x.shape()));
  }
  const int h = x.dim(2);
  const int w = x.dim(3);
  const int oh = h / factor;
  const int ow = w / factor;
  const int offset = factor / 2;
  const std::size_t slices = static_cast<std::size_t>(x.dim(0)) * x.dim(1);
  std::vector<std::size_t> picks;
  picks.reserve(slices * oh * ow);
  std::vector<double> out;
  out.reserve(slices * oh * ow);
  const auto v = x.values();
  for (std::size_t s = 0; s < slices; ++s) {
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        const std::size_t src = (s * h + y * factor + offset) * w + xx * factor + offset;
        picks.push_back(src);
        out.push_back(v[src]);
      }
    }
  }
  return Tensor::make_result({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                             [picks = std::move(picks)](TensorNode& self) {
                               double* g = self.input_grad(0);
                               if (!g) return;
                               for (std::size_t i = 0; i < picks.size(); ++i)
                                 g[picks[i]] += self.grad[i];
                             });
}

namespace {

void check_batch(const Tensor& t, const std::vector<Pose>& a, const std::vector<Pose>& b,
                 const char* op) {
  if (t.rank() != 4 || static_cast<int>(a.size()) != t.dim(0) ||
      static_cast<int>(b.size()) != t.dim(0)) {
    throw ContractViolation(std::string(op) + ": need one pose pair per batch entry");
  }
}

}  // namespace

PartialDepth render_partial_depth(const Tensor& previous_depth,
                                  const std::vector<Pose>& previous_poses,
                                  const std::vector<Pose>& current_poses,
                                  const CameraIntrinsics& k) {
  check_batch(previous_depth, previous_poses, current_poses, "render_partial_depth");
  if (previous_depth.dim(1) != 1 || previous_depth.dim(2) != k.height ||
      previous_depth.dim(3) != k.width) {
    throw ContractViolation("render_partial_depth: depth " +
                            shape_string(previous_depth.shape()) +
                            " does not match bottleneck intrinsics");
  }
  const int batch = previous_depth.dim(0);
  const std::size_t plane = static_cast<std::size_t>(k.width) * k.height;
  const auto src = previous_depth.values();

  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<double> out(batch * plane, 0.0);
  std::vector<std::uint8_t> covered(batch * plane, 0);
  // For each target pixel: source index and d(target depth)/d(source depth).
  std::vector<std::size_t> source(batch * plane, kNone);
  std::vector<double> slope(batch * plane, 0.0);

  for (int b = 0; b < batch; ++b) {
    const Pose cur_from_prev = relative_pose(current_poses[b], previous_poses[b]);
    for (int v = 0; v < k.height; ++v) {
      for (int u = 0; u < k.width; ++u) {
        const std::size_t si = b * plane + static_cast<std::size_t>(v) * k.width + u;
        const double d = src[si];
        if (!(d > 0.0) || !std::isfinite(d)) continue;
        const Eigen::Vector3d ray = unproject_pixel(k, u, v, 1.0);
        const Eigen::Vector3d q = cur_from_prev.rotation * ray;
        const Eigen::Vector3d p = d * q + cur_from_prev.translation;
        if (p.z() <= kMinProjectionDepth) continue;
        const double pu = k.fx * p.x() / p.z() + k.cx;
        const double pv = k.fy * p.y() / p.z() + k.cy;
        const double ru = std::round(pu);
        const double rv = std::round(pv);
        if (ru < 0 || rv < 0 || ru > k.width - 1 || rv > k.height - 1) continue;
        const std::size_t ti =
            b * plane + static_cast<std::size_t>(rv) * k.width + static_cast<std::size_t>(ru);
        if (!covered[ti] || p.z() < out[ti]) {
          covered[ti] = 1;
          out[ti] = p.z();
          source[ti] = si;
          slope[ti] = q.z();
        }
      }
    }
  }

  PartialDepth partial;
  partial.covered = std::move(covered);
  partial.depth = Tensor::make_result(
      {batch, 1, k.height, k.width}, std::move(out), {previous_depth},
      [source = std::move(source), slope = std::move(slope)](TensorNode& self) {
        double* g = self.input_grad(0);
        if (!g) return;
        for (std::size_t i = 0; i < source.size(); ++i) {
          if (source[i] != kNone) g[source[i]] += self.grad[i] * slope[i];
        }
      });
  return partial;
}

PartialDepth render_partial_depth(const DepthMap& previous_depth, const Pose& previous_pose,
                                  const Pose& current_pose, const CameraIntrinsics& k) {
  std::vector<double> values(previous_depth.size(), 0.0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (previous_depth.valid[i]) values[i] = previous_depth.values[i];
  }
  const Tensor t = Tensor::from({1, 1, previous_depth.height, previous_depth.width},
                                std::move(values));
  return render_partial_depth(t, {previous_pose}, {current_pose}, k);
}

PartialDepth partial_depth_from(const std::vector<DepthMap>& current_depth) {
  if (current_depth.empty()) throw ContractViolation("partial_depth_from: empty batch");
  const int w = current_depth[0].width;
  const int h = current_depth[0].height;
  std::vector<double> values;
  PartialDepth partial;
  for (const auto& map : current_depth) {
    if (map.width != w || map.height != h) {
      throw ContractViolation("partial_depth_from: inconsistent sizes");
    }
    for (std::size_t i = 0; i < map.size(); ++i) {
      const bool ok = map.valid[i] && map.values[i] > 0.0;
      values.push_back(ok ? map.values[i] : 0.0);
      partial.covered.push_back(ok ? 1 : 0);
    }
  }
  partial.depth = Tensor::from({static_cast<int>(current_depth.size()), 1, h, w},
                               std::move(values));
  return partial;
}

Tensor warp_grid(const PartialDepth& partial, const std::vector<Pose>& previous_poses,
                 const std::vector<Pose>& current_poses, const CameraIntrinsics& k) {
  check_batch(partial.depth, previous_poses, current_poses, "warp_grid");
  const int batch = partial.depth.dim(0);
  const std::size_t plane = static_cast<std::size_t>(k.width) * k.height;
  if (partial.depth.numel() != batch * plane || partial.covered.size() != batch * plane) {
    throw ContractViolation("warp_grid: partial depth does not match intrinsics");
  }
  const auto depth = partial.depth.values();
  std::vector<double> grid(batch * plane * 2, kOutOfBoundsCoordinate);
  // d(grid)/d(depth) per pixel, (du, dv).
  std::vector<double> jac(batch * plane * 2, 0.0);
  for (int b = 0; b < batch; ++b) {
    const Pose prev_from_cur = relative_pose(previous_poses[b], current_poses[b]);
    const Eigen::Vector3d& t = prev_from_cur.translation;
    const bool identity = is_exact_identity(prev_from_cur);
    for (int v = 0; v < k.height; ++v) {
      for (int u = 0; u < k.width; ++u) {
        const std::size_t i = b * plane + static_cast<std::size_t>(v) * k.width + u;
        if (!partial.covered[i]) continue;
        if (identity) {
          grid[2 * i] = u;
          grid[2 * i + 1] = v;
          continue;
        }
        const double d = depth[i];
        const Eigen::Vector3d q = prev_from_cur.rotation * unproject_pixel(k, u, v, 1.0);
        const Eigen::Vector3d p = d * q + t;
        if (p.z() <= kMinProjectionDepth) continue;
        const double z2 = p.z() * p.z();
        grid[2 * i] = k.fx * p.x() / p.z() + k.cx;
        grid[2 * i + 1] = k.fy * p.y() / p.z() + k.cy;
        jac[2 * i] = k.fx * (q.x() * t.z() - t.x() * q.z()) / z2;
        jac[2 * i + 1] = k.fy * (q.y() * t.z() - t.y() * q.z()) / z2;
      }
    }
  }
  return Tensor::make_result({batch, k.height, k.width, 2}, std::move(grid),
                             {partial.depth},
                             [jac = std::move(jac)](TensorNode& self) {
                               double* g = self.input_grad(0);
                               if (!g) return;
                               const std::size_t n = jac.size() / 2;
                               for (std::size_t i = 0; i < n; ++i) {
                                 g[i] += self.grad[2 * i] * jac[2 * i] +
                                         self.grad[2 * i + 1] * jac[2 * i + 1];
                               }
                             });
}

Tensor warp_hidden(const Tensor& previous_hidden, const PartialDepth& partial,
                   const std::vector<Pose>& previous_poses,
                   const std::vector<Pose>& current_poses, const CameraIntrinsics& k) {
  if (previous_hidden.rank() != 4 || previous_hidden.dim(2) != k.height ||
      previous_hidden.dim(3) != k.width) {
    throw ContractViolation("warp_hidden: hidden state " +
                            shape_string(previous_hidden.shape()) +
                            " does not match bottleneck intrinsics");
  }
  return grid_sample_bilinear(previous_hidden,
                              warp_grid(partial, previous_poses, current_poses, k));
}

}  // namespace dvmvs
