#include "dvmvs/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

namespace dvmvs {

bool Box::contains(const Eigen::Vector3d& p) const {
  return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
}

double Box::distance(const Eigen::Vector3d& p) const {
  const Eigen::Vector3d outside = (min - p).cwiseMax(p - max).cwiseMax(0.0);
  return outside.norm();
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double lattice(std::int64_t x, std::int64_t y, std::int64_t z, std::uint64_t seed) {
  std::uint64_t h = splitmix(seed);
  h = splitmix(h ^ static_cast<std::uint64_t>(x));
  h = splitmix(h ^ static_cast<std::uint64_t>(y));
  h = splitmix(h ^ static_cast<std::uint64_t>(z));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

}  // namespace

double value_noise(const Eigen::Vector3d& p, std::uint64_t seed) {
  const Eigen::Vector3d f = p.array().floor();
  const auto x0 = static_cast<std::int64_t>(f.x());
  const auto y0 = static_cast<std::int64_t>(f.y());
  const auto z0 = static_cast<std::int64_t>(f.z());
  const double tx = smooth(p.x() - f.x());
  const double ty = smooth(p.y() - f.y());
  const double tz = smooth(p.z() - f.z());
  double result = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    for (int dy = 0; dy < 2; ++dy) {
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? tx : 1.0 - tx) * (dy ? ty : 1.0 - ty) * (dz ? tz : 1.0 - tz);
        result += w * lattice(x0 + dx, y0 + dy, z0 + dz, seed);
      }
    }
  }
  return result;
}

std::optional<RayHit> cast_ray(const SyntheticScene& scene, const Eigen::Vector3d& origin,
                               const Eigen::Vector3d& direction) {
  RayHit best;
  best.distance = std::numeric_limits<double>::infinity();
  for (int axis = 0; axis < 3; ++axis) {
    const double d = direction[axis];
    if (d == 0.0) continue;
    const double bound = d > 0.0 ? scene.room.max[axis] : scene.room.min[axis];
    const double t = (bound - origin[axis]) / d;
    if (t > 0.0 && t < best.distance) {
      best.distance = t;
      best.surface = 2 * axis + (d > 0.0 ? 1 : 0);
    }
  }
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    const Box& box = scene.boxes[i];
    double t_enter = -std::numeric_limits<double>::infinity();
    double t_exit = std::numeric_limits<double>::infinity();
    bool miss = false;
    for (int axis = 0; axis < 3 && !miss; ++axis) {
      const double d = direction[axis];
      if (d == 0.0) {
        miss = origin[axis] < box.min[axis] || origin[axis] > box.max[axis];
        continue;
      }
      double t1 = (box.min[axis] - origin[axis]) / d;
      double t2 = (box.max[axis] - origin[axis]) / d;
      if (t1 > t2) std::swap(t1, t2);
      t_enter = std::max(t_enter, t1);
      t_exit = std::min(t_exit, t2);
    }
    if (miss || t_exit < t_enter || t_enter <= 0.0) continue;
    if (t_enter < best.distance) {
      best.distance = t_enter;
      best.surface = 6 + static_cast<int>(i);
    }
  }
  if (best.surface < 0) return std::nullopt;
  best.point = origin + best.distance * direction;
  return best;
}

CameraIntrinsics make_intrinsics(const SceneConfig& config) {
  CameraIntrinsics k;
  k.width = config.width;
  k.height = config.height;
  const double half = config.field_of_view * std::numbers::pi / 360.0;
  k.fx = 0.5 * config.width / std::tan(half);
  k.fy = k.fx;
  k.cx = 0.5 * (config.width - 1);
  k.cy = 0.5 * (config.height - 1);
  return k;
}

Pose look_along(const Eigen::Vector3d& position, const Eigen::Vector3d& forward) {
  const Eigen::Vector3d z = forward.normalized();
  Eigen::Vector3d up(0.0, 0.0, 1.0);
  if (std::abs(z.dot(up)) > 0.999) up = Eigen::Vector3d(0.0, 1.0, 0.0);
  const Eigen::Vector3d x = z.cross(up).normalized();
  const Eigen::Vector3d y = z.cross(x);
  Pose pose;
  pose.rotation.col(0) = x;
  pose.rotation.col(1) = y;
  pose.rotation.col(2) = z;
  pose.translation = position;
  return pose;
}

namespace {

Eigen::Vector3d surface_color(const SyntheticScene& scene, const RayHit& hit) {
  const std::uint64_t surface_seed =
      splitmix(scene.texture_seed ^ (0x51ed27ULL + static_cast<std::uint64_t>(hit.surface)));
  Eigen::Vector3d color;
  for (int c = 0; c < 3; ++c) {
    const std::uint64_t seed = splitmix(surface_seed + static_cast<std::uint64_t>(c));
    const double base = 0.35 + 0.65 * lattice(hit.surface, c, 0, scene.texture_seed);
    const Eigen::Vector3d p = hit.point;
    const double fbm = 0.4 * value_noise(p * 3.0, seed) + 0.4 * value_noise(p * 7.0, seed + 1) +
                       0.2 * value_noise(p * 14.0, seed + 2);
    color[c] = base * std::clamp(0.5 + 2.2 * (fbm - 0.5), 0.05, 1.0);
  }
  return color;
}

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Frame render_frame(const SyntheticScene& scene, const Pose& pose) {
  const CameraIntrinsics& k = scene.intrinsics;
  Frame frame;
  frame.pose = pose;
  frame.image.width = k.width;
  frame.image.height = k.height;
  frame.image.pixels.assign(static_cast<std::size_t>(k.width) * k.height * 3, 0);
  frame.depth = DepthMap(k.width, k.height);
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      const Eigen::Vector3d ray_camera((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
      const Eigen::Vector3d ray = pose.rotation * ray_camera;
      const auto hit = cast_ray(scene, pose.translation, ray);
      const std::size_t i = static_cast<std::size_t>(v) * k.width + u;
      if (!hit) continue;
      // The camera-space ray has unit z, so the ray parameter is the depth.
      frame.depth.values[i] = hit->distance;
      frame.depth.valid[i] = 1;
      const Eigen::Vector3d color = surface_color(scene, *hit);
      for (int c = 0; c < 3; ++c) frame.image.pixels[i * 3 + c] = quantize(color[c]);
    }
  }
  return frame;
}

namespace {

double clearance_of(const SyntheticScene& scene, const Eigen::Vector3d& p) {
  double d = std::numeric_limits<double>::infinity();
  for (int axis = 0; axis < 3; ++axis) {
    d = std::min({d, p[axis] - scene.room.min[axis], scene.room.max[axis] - p[axis]});
  }
  for (const Box& box : scene.boxes) d = std::min(d, box.distance(p));
  return d;
}

void build_room(SyntheticScene& scene, const SceneConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> horizontal(4.0, 8.0);
  std::uniform_real_distribution<double> vertical(2.6, 3.2);
  scene.room.min = Eigen::Vector3d::Zero();
  scene.room.max = Eigen::Vector3d(horizontal(rng), horizontal(rng), vertical(rng));
  scene.boxes.clear();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < config.interior_boxes; ++i) {
    Box box;
    const Eigen::Vector3d size(0.5 + unit(rng), 0.5 + unit(rng), 0.4 + 0.8 * unit(rng));
    box.min.x() = unit(rng) * (scene.room.max.x() - size.x());
    box.min.y() = unit(rng) * (scene.room.max.y() - size.y());
    box.min.z() = 0.0;
    box.max = box.min + size;
    scene.boxes.push_back(box);
  }
}

bool build_trajectory(SyntheticScene& scene, int frame_count, double step_distance,
                      const SceneConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Eigen::Vector3d centre = 0.5 * (scene.room.min + scene.room.max);

  Eigen::Vector3d position;
  bool placed = false;
  for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
    position = Eigen::Vector3d(unit(rng) * scene.room.max.x(), unit(rng) * scene.room.max.y(),
                               1.2 + 0.6 * unit(rng));
    placed = clearance_of(scene, position) > config.clearance + 0.3;
  }
  if (!placed) return false;
  const double yaw = 2.0 * std::numbers::pi * unit(rng);
  const double pitch = 0.15 * (unit(rng) - 0.5);
  Pose pose = look_along(position, Eigen::Vector3d(std::cos(yaw) * std::cos(pitch),
                                                   std::sin(yaw) * std::cos(pitch),
                                                   std::sin(pitch)));
  Eigen::Vector3d velocity(gauss(rng), gauss(rng), 0.0);
  if (velocity.norm() < 1e-9) velocity = Eigen::Vector3d::UnitX();
  velocity.normalize();
  double turn = unit(rng) < 0.5 ? -1.0 : 1.0;

  scene.trajectory = {pose};
  for (int i = 1; i < frame_count; ++i) {
    if (unit(rng) < 0.1) turn = -turn;
    bool stepped = false;
    for (int attempt = 0; attempt < 60 && !stepped; ++attempt) {
      const double share =
          config.min_rotation_share +
          (config.max_rotation_share - config.min_rotation_share) * unit(rng);
      const double rotation_part = step_distance * share;
      const double translation = step_distance * std::sqrt(1.0 - share * share);
      const double angle = std::acos(std::clamp(1.0 - 0.75 * rotation_part * rotation_part,
                                                -1.0, 1.0));

      Eigen::Vector3d direction =
          velocity + 0.35 * Eigen::Vector3d(gauss(rng), gauss(rng), 0.3 * gauss(rng));
      direction.z() -= 0.5 * (pose.translation.z() - 1.5);
      if (attempt > 20) direction += (centre - pose.translation).normalized();
      direction.normalize();
      const Eigen::Vector3d next = pose.translation + translation * direction;
      if (clearance_of(scene, next) < config.clearance) continue;

      // Rotation axis in the camera frame: mostly yaw, with corrections that
      // keep the view near horizontal and upright.
      const Eigen::Vector3d forward = pose.rotation.col(2);
      const Eigen::Vector3d right = pose.rotation.col(0);
      const double current_pitch = std::asin(std::clamp(forward.z(), -1.0, 1.0));
      const double current_roll = std::asin(std::clamp(right.z(), -1.0, 1.0));
      Eigen::Vector3d axis(-2.0 * current_pitch + 0.3 * gauss(rng), turn + 0.2 * gauss(rng),
                           2.0 * current_roll);
      if (axis.norm() < 1e-9) axis = Eigen::Vector3d::UnitY();
      axis.normalize();
      Pose next_pose;
      next_pose.rotation = pose.rotation * axis_angle(axis, angle);
      next_pose.translation = next;
      pose = next_pose;
      velocity = direction;
      stepped = true;
    }
    if (!stepped) return false;
    scene.trajectory.push_back(pose);
  }
  return true;
}

}  // namespace

SyntheticScene generate_scene(std::uint64_t seed, int frame_count, double step_distance,
                              const SceneConfig& config) {
  if (frame_count < 2) throw ContractViolation("generate_scene: at least two frames required");
  if (!(step_distance > 0.0)) throw ContractViolation("generate_scene: step must be positive");
  std::mt19937_64 rng(seed);
  SyntheticScene scene;
  scene.intrinsics = make_intrinsics(config);
  scene.texture_seed = splitmix(seed ^ 0x7e7u);
  for (int room_attempt = 0; room_attempt < 20; ++room_attempt) {
    build_room(scene, config, rng);
    for (int attempt = 0; attempt < 10; ++attempt) {
      if (build_trajectory(scene, frame_count, step_distance, config, rng)) return scene;
    }
  }
  throw std::runtime_error("generate_scene: no trajectory stays inside the room for seed " +
                           std::to_string(seed));
}

Sequence render_sequence(const SyntheticScene& scene, const std::string& name) {
  Sequence sequence;
  sequence.name = name;
  sequence.intrinsics = scene.intrinsics;
  sequence.frames.reserve(scene.trajectory.size());
  for (const Pose& pose : scene.trajectory) sequence.frames.push_back(render_frame(scene, pose));
  return sequence;
}

}  // namespace dvmvs
