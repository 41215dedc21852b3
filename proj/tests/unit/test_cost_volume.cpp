#include <doctest.h>

#include <cmath>
#include <random>

#include "dvmvs/cost_volume.hpp"
#include "support/gradcheck.hpp"
#include "support/plane_scene.hpp"
#include "support/random_pose.hpp"

using namespace dvmvs;
using namespace dvmvs::testing;

namespace {

CameraIntrinsics small_camera(int w, int h) {
  CameraIntrinsics k;
  k.fx = k.fy = 0.9 * w;
  k.cx = (w - 1) / 2.0;
  k.cy = (h - 1) / 2.0;
  k.width = w;
  k.height = h;
  return k;
}

FeatureMap features(Tensor data, std::vector<Pose> poses) {
  return {data, std::move(poses), small_camera(data.dim(3), data.dim(2))};
}

}  // namespace

TEST_SUITE("cost_volume") {

TEST_CASE("zero measurement features give a zero volume") {
  std::mt19937_64 rng(1);
  auto ref = features(random_tensor({1, 8, 6, 6}, rng), {Pose::identity()});
  auto meas = features(Tensor::zeros({1, 8, 6, 6}), {translation_pose(0.1, 0, 0)});
  const auto v = build_cost_volume(ref, meas, sample_planes(0.25, 20, 8));
  CHECK(v.data.shape() == Shape{1, 8, 6, 6});
  for (double x : v.data.values()) CHECK(x == 0.0);
}

TEST_CASE("identity pose with unit features gives -1 everywhere") {
  auto ones = features(Tensor::full({2, kFeatureChannels, 4, 4}, 1.0), {Pose::identity(), Pose::identity()});
  const auto v = build_cost_volume(ones, ones, sample_planes(0.25, 20, 64));
  CHECK(v.data.shape() == Shape{2, 64, 4, 4});
  for (double x : v.data.values()) CHECK(x == -1.0);
}

TEST_CASE("identity pose: constant across planes") {
  std::mt19937_64 rng(2);
  const Pose p = random_pose(rng);
  auto ref = features(random_tensor({1, 8, 5, 7}, rng), {p});
  auto meas = features(random_tensor({1, 8, 5, 7}, rng), {p});
  const auto v = build_cost_volume(ref, meas, sample_planes(0.25, 20, 6));
  const auto x = v.data.values();
  for (int m = 1; m < 6; ++m)
    for (int i = 0; i < 35; ++i) CHECK(x[m * 35 + i] == x[i]);
}

TEST_CASE("matches a composition of grid sampling and channel sums") {
  std::mt19937_64 rng(3);
  const int C = 6, H = 6, W = 8;
  const Pose pr = random_pose(rng, 0.1, 0.2), pm = random_pose(rng, 0.1, 0.2);
  auto ref = features(random_tensor({1, C, H, W}, rng), {pr});
  auto meas = features(random_tensor({1, C, H, W}, rng), {pm});
  const auto planes = sample_planes(0.5, 10, 5);
  const auto v = build_cost_volume(ref, meas, planes);
  for (int m = 0; m < 5; ++m) {
    const Tensor grid = planesweep_grid_tensor(ref.intrinsics, relative_pose(pm, pr), planes.depths[m]);
    const Tensor warped = grid_sample_bilinear(meas.data, grid);
    const Tensor prod = mul(ref.data, warped);
    for (int p = 0; p < H * W; ++p) {
      double acc = 0.0;
      for (int c = 0; c < C; ++c) acc += prod.at(c * H * W + p);
      CHECK(v.data.at(m * H * W + p) == doctest::Approx(-acc / C).epsilon(1e-12));
    }
  }
}

TEST_CASE("Cauchy-Schwarz bound") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const int C = 8, H = 6, W = 6;
    auto ref = features(random_tensor({1, C, H, W}, rng), {random_pose(rng, 0.1, 0.1)});
    auto meas = features(random_tensor({1, C, H, W}, rng), {random_pose(rng, 0.1, 0.1)});
    const auto v = build_cost_volume(ref, meas, sample_planes(0.25, 20, 10));
    // Bilinear weights sum to at most one, so a warped feature norm is at
    // most the largest measurement norm.
    double ref_max = 0.0, meas_max = 0.0;
    for (int p = 0; p < H * W; ++p) {
      double a = 0.0, b = 0.0;
      for (int c = 0; c < C; ++c) {
        a += std::pow(ref.data.at(c * H * W + p), 2);
        b += std::pow(meas.data.at(c * H * W + p), 2);
      }
      ref_max = std::max(ref_max, std::sqrt(a));
      meas_max = std::max(meas_max, std::sqrt(b));
    }
    for (double x : v.data.values()) CHECK(std::abs(x) <= ref_max * meas_max / C + 1e-12);
  }
}

TEST_CASE("averaging") {
  std::mt19937_64 rng(5);
  CostVolume a{random_tensor({1, 4, 3, 3}, rng), sample_planes(0.25, 20, 4)};
  CostVolume negated{neg(a.data), a.planes};
  const auto single = average_cost_volumes({a});
  for (std::size_t i = 0; i < a.data.numel(); ++i) CHECK(single.data.at(i) == a.data.at(i));
  const auto twice = average_cost_volumes({a, a});
  for (std::size_t i = 0; i < a.data.numel(); ++i) CHECK(twice.data.at(i) == doctest::Approx(a.data.at(i)).epsilon(1e-15));
  const auto zero = average_cost_volumes({a, negated});
  for (double x : zero.data.values()) CHECK(x == 0.0);
  CHECK_THROWS_AS(average_cost_volumes({}), ContractViolation);
  CostVolume other{a.data, sample_planes(0.5, 20, 4)};
  CHECK_THROWS_AS(average_cost_volumes({a, other}), ContractViolation);
}

TEST_CASE("shape mismatches are rejected") {
  auto a = features(Tensor::zeros({1, 8, 4, 4}), {Pose::identity()});
  auto b = features(Tensor::zeros({1, 8, 4, 6}), {Pose::identity()});
  CHECK_THROWS_AS(build_cost_volume(a, b, sample_planes(0.25, 20, 4)), ContractViolation);
}

TEST_CASE("gradcheck into both feature maps") {
  std::mt19937_64 rng(6);
  auto ref = features(random_tensor({2, 8, 8, 8}, rng), {random_pose(rng, 0.1, 0.1), random_pose(rng, 0.1, 0.1)});
  auto meas = features(random_tensor({2, 8, 8, 8}, rng), {random_pose(rng, 0.1, 0.1), random_pose(rng, 0.1, 0.1)});
  const auto planes = sample_planes(0.5, 10, 4);
  auto r = gradcheck([&] { return random_projection(build_cost_volume(ref, meas, planes).data, 3); },
                     {{"ref", ref.data}, {"meas", meas.data}});
  INFO(r.worst);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("textured plane: argmin at the nearest hypothesis") {
  const auto planes = sample_planes(kDefaultNear, kDefaultFar, kDefaultPlaneCount);
  for (std::uint64_t seed : {101u, 102u}) {
    const auto r = localize_plane(seed, planes);
    INFO("depth " << r.true_depth << " textured " << r.textured);
    CHECK(r.textured > 100);
    CHECK(r.rate() >= 0.95);
  }
}

}  // TEST_SUITE
