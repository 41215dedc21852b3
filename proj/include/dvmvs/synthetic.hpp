#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dvmvs/dataset.hpp"

namespace dvmvs {

struct Box {
  Eigen::Vector3d min = Eigen::Vector3d::Zero();
  Eigen::Vector3d max = Eigen::Vector3d::Ones();

  bool contains(const Eigen::Vector3d& p) const;
  double distance(const Eigen::Vector3d& p) const;
};

struct SceneConfig {
  int width = 64;
  int height = 64;
  /// Horizontal field of view in degrees.
  double field_of_view = 60.0;
  int interior_boxes = 2;
  /// Range of the share of each step's pose distance that comes from
  /// rotation (the rest is translation).
  double min_rotation_share = 0.3;
  double max_rotation_share = 0.7;
  /// Minimum distance between any camera centre and any surface.
  double clearance = 0.6;
};

/// World frame: z up; the room spans [0, size] on every axis.
struct SyntheticScene {
  Box room;
  std::vector<Box> boxes;
  std::uint64_t texture_seed = 0;
  CameraIntrinsics intrinsics;
  std::vector<Pose> trajectory;
};

struct RayHit {
  double distance = 0.0;  // along the unit-free ray parameter
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
  int surface = -1;       // 0..5 room walls, 6+ interior boxes
};

/// Nearest intersection of origin + t * direction with the scene, t > 0.
std::optional<RayHit> cast_ray(const SyntheticScene& scene, const Eigen::Vector3d& origin,
                               const Eigen::Vector3d& direction);

CameraIntrinsics make_intrinsics(const SceneConfig& config);

/// Camera looking along a world direction with the image y axis pointing as
/// far down as possible.
Pose look_along(const Eigen::Vector3d& position, const Eigen::Vector3d& forward);

/// Exact z-depth and procedural color for every pixel.
Frame render_frame(const SyntheticScene& scene, const Pose& pose);

/// Room, boxes and a smooth trajectory whose consecutive pose distances
/// equal step_distance. Trajectories that leave the free space are
/// regenerated; throws std::runtime_error after too many attempts.
SyntheticScene generate_scene(std::uint64_t seed, int frame_count, double step_distance,
                              const SceneConfig& config = {});

/// Scene plus rendered frames.
Sequence render_sequence(const SyntheticScene& scene, const std::string& name);

/// Value noise in [0, 1], smooth in the 3-D position.
double value_noise(const Eigen::Vector3d& p, std::uint64_t seed);

}  // namespace dvmvs
