#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <vector>

#include "dvmvs/tensor.hpp"

namespace dvmvs {

/// Pinhole intrinsics in pixels. Pixel (u, v) has its centre at integer
/// coordinates.
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  void validate() const;
  /// Intrinsics of the image resampled by 1/factor, e.g. factor 2 for the
  /// half-resolution feature maps: cx' = (cx + 0.5) / factor - 0.5.
  CameraIntrinsics downscaled(int factor) const;
  Eigen::Matrix3d matrix() const;
};

/// Rigid camera-to-world transform.
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return {}; }
  static Pose from_matrix(const Eigen::Matrix4d& m);
  Eigen::Matrix4d matrix() const;

  Pose inverse() const;
  Pose operator*(const Pose& other) const;
  Eigen::Vector3d operator*(const Eigen::Vector3d& p) const {
    return rotation * p + translation;
  }
  /// Orthonormality and det = +1 to the given tolerance.
  bool is_valid(double tolerance = 1e-9) const;
};

/// a^-1 * b: maps points expressed in b's camera frame into a's camera
/// frame, i.e. the pose of b seen from a.
Pose relative_pose(const Pose& a, const Pose& b);

/// True only for bit-exact identity rotation and zero translation.
bool is_exact_identity(const Pose& pose);

double rotation_trace_term(const Pose& rel);

/// sqrt(|t|^2 + 2/3 tr(I - R)).
double pose_distance(const Pose& rel);

inline constexpr double kPreferredBaseline = 0.15;

/// Ranking score that prefers a 15 cm baseline and small rotation; short
/// baselines are penalized five times harder than long ones.
double keyframe_penalty(const Pose& rel);

struct PlaneHypotheses {
  std::vector<double> depths;
  double near = 0.0;
  double far = 0.0;

  std::size_t size() const { return depths.size(); }
};

inline constexpr double kDefaultNear = 0.25;
inline constexpr double kDefaultFar = 20.0;
inline constexpr int kDefaultPlaneCount = 64;

/// Depths uniformly spaced in inverse depth from near (index 0) to far.
PlaneHypotheses sample_planes(double near, double far, int count);

/// Camera-frame depth below which a point counts as behind the camera.
inline constexpr double kMinProjectionDepth = 1e-6;

/// Coordinate written for samples that must read as zero (far outside any
/// image).
inline constexpr double kOutOfBoundsCoordinate = -1.0e6;

/// Per reference pixel, the continuous measurement-image coordinate of the
/// point on the fronto-parallel plane z = depth in the reference frame.
/// meas_from_ref maps reference-frame points into the measurement frame.
/// Returns [height, width, 2] (x, y) in row-major order; the measurement
/// image is assumed to share intrinsics with the reference.
std::vector<double> planesweep_grid(const CameraIntrinsics& intrinsics,
                                    const Pose& meas_from_ref, double depth);

/// Same grid as a [1, H, W, 2] tensor for grid_sample_bilinear.
Tensor planesweep_grid_tensor(const CameraIntrinsics& intrinsics,
                              const Pose& meas_from_ref, double depth);

Eigen::Vector3d unproject_pixel(const CameraIntrinsics& intrinsics, double u,
                                double v, double depth);

/// Unprojects every pixel of a row-major depth map (height x width of the
/// intrinsics). Throws ContractViolation on non-positive depth.
std::vector<Eigen::Vector3d> unproject(const CameraIntrinsics& intrinsics,
                                       std::span<const double> depth);

struct ProjectedPoint {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
  bool in_front = false;
};

/// Transforms points by target_from_source and projects them with the
/// pinhole model. Points at or below kMinProjectionDepth are flagged.
std::vector<ProjectedPoint> project_points(
    const CameraIntrinsics& intrinsics, const Pose& target_from_source,
    const std::vector<Eigen::Vector3d>& points);

/// Rotation about a unit axis by an angle in radians.
Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double angle);

}  // namespace dvmvs
