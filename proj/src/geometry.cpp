#include "dvmvs/geometry.hpp"

#include <cmath>
#include <string>

namespace dvmvs {

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0 && fy > 0.0)) {
    throw ContractViolation("intrinsics: focal lengths must be positive");
  }
  if (width <= 0 || height <= 0) {
    throw ContractViolation("intrinsics: image size must be positive");
  }
  if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height)) {
    throw ContractViolation("intrinsics: principal point outside the image");
  }
}

CameraIntrinsics CameraIntrinsics::downscaled(int factor) const {
  if (factor <= 0 || width % factor != 0 || height % factor != 0) {
    throw ContractViolation("intrinsics: cannot downscale " +
                            std::to_string(width) + "x" + std::to_string(height) +
                            " by " + std::to_string(factor));
  }
  const double s = 1.0 / factor;
  CameraIntrinsics out;
  out.fx = fx * s;
  out.fy = fy * s;
  out.cx = (cx + 0.5) * s - 0.5;
  out.cy = (cy + 0.5) * s - 0.5;
  out.width = width / factor;
  out.height = height / factor;
  return out;
}

Eigen::Matrix3d CameraIntrinsics::matrix() const {
  Eigen::Matrix3d k;
  k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return k;
}

Pose Pose::from_matrix(const Eigen::Matrix4d& m) {
  Pose p;
  p.rotation = m.topLeftCorner<3, 3>();
  p.translation = m.topRightCorner<3, 1>();
  return p;
}

Eigen::Matrix4d Pose::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

Pose Pose::inverse() const {
  Pose p;
  p.rotation = rotation.transpose();
  p.translation = -(p.rotation * translation);
  return p;
}

Pose Pose::operator*(const Pose& other) const {
  Pose p;
  p.rotation = rotation * other.rotation;
  p.translation = rotation * other.translation + translation;
  return p;
}

bool Pose::is_valid(double tolerance) const {
  if (!rotation.allFinite() || !translation.allFinite()) return false;
  const double ortho =
      (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tolerance && std::abs(rotation.determinant() - 1.0) <= tolerance;
}

bool is_exact_identity(const Pose& pose) {
  return pose.rotation == Eigen::Matrix3d::Identity() && pose.translation.isZero(0.0);
}

Pose relative_pose(const Pose& a, const Pose& b) {
  // Same pose: exactly identity, not identity up to rounding.
  if (a.rotation == b.rotation && a.translation == b.translation) return Pose::identity();
  Pose p;
  p.rotation = a.rotation.transpose() * b.rotation;
  p.translation = a.rotation.transpose() * (b.translation - a.translation);
  return p;
}

double rotation_trace_term(const Pose& rel) {
  return (2.0 / 3.0) * (3.0 - rel.rotation.trace());
}

double pose_distance(const Pose& rel) {
  const double value = rel.translation.squaredNorm() + rotation_trace_term(rel);
  // tr(I - R) >= 0 for any rotation; rounding can leave a tiny negative.
  return std::sqrt(std::max(0.0, value));
}

double keyframe_penalty(const Pose& rel) {
  const double baseline = rel.translation.norm();
  const double alpha = baseline <= kPreferredBaseline ? 5.0 : 1.0;
  const double offset = baseline - kPreferredBaseline;
  return alpha * offset * offset + rotation_trace_term(rel);
}

PlaneHypotheses sample_planes(double near, double far, int count) {
  if (!(near > 0.0 && near < far) || !std::isfinite(far)) {
    throw ContractViolation("sample_planes: need 0 < near < far");
  }
  if (count < 2) throw ContractViolation("sample_planes: need at least 2 planes");
  PlaneHypotheses planes;
  planes.near = near;
  planes.far = far;
  planes.depths.resize(static_cast<std::size_t>(count));
  const double inv_near = 1.0 / near;
  const double inv_far = 1.0 / far;
  for (int m = 0; m < count; ++m) {
    const double t = static_cast<double>(m) / (count - 1);
    planes.depths[static_cast<std::size_t>(m)] = 1.0 / (inv_near - t * (inv_near - inv_far));
  }
  planes.depths.front() = near;
  planes.depths.back() = far;
  return planes;
}

std::vector<double> planesweep_grid(const CameraIntrinsics& intrinsics,
                                    const Pose& meas_from_ref, double depth) {
  if (!(depth > 0.0)) throw ContractViolation("planesweep_grid: depth must be positive");
  const int w = intrinsics.width;
  const int h = intrinsics.height;
  std::vector<double> grid(static_cast<std::size_t>(w) * h * 2);
  const Eigen::Matrix3d& r = meas_from_ref.rotation;
  const Eigen::Vector3d& t = meas_from_ref.translation;
  if (is_exact_identity(meas_from_ref)) {
    for (int v = 0; v < h; ++v) {
      for (int u = 0; u < w; ++u) {
        const std::size_t idx = (static_cast<std::size_t>(v) * w + u) * 2;
        grid[idx] = u;
        grid[idx + 1] = v;
      }
    }
    return grid;
  }
  // Homography of the plane z = depth: x_meas ~ K (R + t n^T / d) K^-1 x_ref.
  Eigen::Matrix3d plane_term = r;
  plane_term.col(2) += t / depth;
  const Eigen::Matrix3d homography =
      intrinsics.matrix() * plane_term * intrinsics.matrix().inverse();
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const Eigen::Vector3d p = homography * Eigen::Vector3d(u, v, 1.0);
      const std::size_t idx = (static_cast<std::size_t>(v) * w + u) * 2;
      // p.z() is the measurement-frame depth divided by the plane depth.
      if (p.z() * depth <= kMinProjectionDepth) {
        grid[idx] = kOutOfBoundsCoordinate;
        grid[idx + 1] = kOutOfBoundsCoordinate;
      } else {
        grid[idx] = p.x() / p.z();
        grid[idx + 1] = p.y() / p.z();
      }
    }
  }
  return grid;
}

Tensor planesweep_grid_tensor(const CameraIntrinsics& intrinsics,
                              const Pose& meas_from_ref, double depth) {
  return Tensor::from({1, intrinsics.height, intrinsics.width, 2},
                      planesweep_grid(intrinsics, meas_from_ref, depth));
}

Eigen::Vector3d unproject_pixel(const CameraIntrinsics& intrinsics, double u,
                                double v, double depth) {
  return {(u - intrinsics.cx) / intrinsics.fx * depth,
          (v - intrinsics.cy) / intrinsics.fy * depth, depth};
}

std::vector<Eigen::Vector3d> unproject(const CameraIntrinsics& intrinsics,
                                       std::span<const double> depth) {
  const std::size_t n = static_cast<std::size_t>(intrinsics.width) * intrinsics.height;
  if (depth.size() != n) throw ContractViolation("unproject: depth map size mismatch");
  std::vector<Eigen::Vector3d> points;
  points.reserve(n);
  for (int v = 0; v < intrinsics.height; ++v) {
    for (int u = 0; u < intrinsics.width; ++u) {
      const double d = depth[static_cast<std::size_t>(v) * intrinsics.width + u];
      if (!(d > 0.0)) {
        throw ContractViolation("unproject: non-positive depth at (" +
                                std::to_string(u) + ", " + std::to_string(v) + ")");
      }
      points.push_back(unproject_pixel(intrinsics, u, v, d));
    }
  }
  return points;
}

std::vector<ProjectedPoint> project_points(
    const CameraIntrinsics& intrinsics, const Pose& target_from_source,
    const std::vector<Eigen::Vector3d>& points) {
  std::vector<ProjectedPoint> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Eigen::Vector3d p = target_from_source * points[i];
    ProjectedPoint& q = out[i];
    q.depth = p.z();
    q.in_front = p.z() > kMinProjectionDepth;
    if (q.in_front) {
      q.u = intrinsics.fx * p.x() / p.z() + intrinsics.cx;
      q.v = intrinsics.fy * p.y() / p.z() + intrinsics.cy;
    }
  }
  return out;
}

Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

}  // namespace dvmvs
