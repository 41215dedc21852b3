// One PASS/FAIL line per acceptance criterion. Exit status is the number of
// failed criteria.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "dvmvs/synthetic.hpp"
#include "dvmvs/training.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/plane_scene.hpp"
#include "support/random_pose.hpp"

using namespace dvmvs;
using namespace dvmvs::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

bool verbose = false;

void note(const std::string& line) {
  if (verbose) std::cerr << "  " << line << "\n";
}

// ---------------------------------------------------------------------------
// 1. Gradients

struct GradSuite {
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  std::vector<std::string> failures;

  void add(const std::string& name, const GradcheckResult& r) {
    checked += r.checked;
    note(name + ": " + fmt(r.max_relative_error, 3) + " over " + std::to_string(r.checked));
    if (r.max_relative_error > worst) {
      worst = r.max_relative_error;
      worst_name = name + " " + r.worst;
    }
    if (!r.ok()) failures.push_back(name);
  }
  void add_exact(const std::string& name, bool ok) {
    note(name + (ok ? ": ok" : ": FAILED"));
    if (!ok) failures.push_back(name);
  }
};

CameraIntrinsics square_camera(int size) {
  CameraIntrinsics k;
  k.fx = k.fy = 0.866 * size;
  k.cx = k.cy = (size - 1) / 2.0;
  k.width = k.height = size;
  return k;
}

void primitive_gradients(GradSuite& suite) {
  std::mt19937_64 rng(11);
  const Shape s{2, 3, 4, 5};
  Tensor a = random_tensor(s, rng), b = random_tensor(s, rng);
  Tensor positive = random_tensor(s, rng, 0.5, 2.0);
  Tensor away_from_zero = random_tensor(s, rng, 0.2, 1.0);
  {
    auto v = away_from_zero.mutable_values();
    for (std::size_t i = 0; i < v.size(); i += 2) v[i] = -v[i];
  }
  Tensor gain = random_tensor({1}, rng);
  auto proj = [](const Tensor& x) { return random_projection(x, 3); };
  suite.add("add", gradcheck([&] { return proj(add(a, b)); }, {{"a", a}, {"b", b}}));
  suite.add("sub", gradcheck([&] { return proj(sub(a, b)); }, {{"a", a}, {"b", b}}));
  suite.add("mul", gradcheck([&] { return proj(mul(a, b)); }, {{"a", a}, {"b", b}}));
  suite.add("neg", gradcheck([&] { return proj(neg(a)); }, {{"a", a}}));
  suite.add("add_scalar", gradcheck([&] { return proj(add_scalar(a, 0.7)); }, {{"a", a}}));
  suite.add("mul_scalar", gradcheck([&] { return proj(mul_scalar(a, -1.3)); }, {{"a", a}}));
  suite.add("mul_by_scalar_tensor",
            gradcheck([&] { return proj(mul_by_scalar_tensor(a, gain)); }, {{"a", a}, {"gain", gain}}));
  suite.add("one_minus", gradcheck([&] { return proj(one_minus(a)); }, {{"a", a}}));
  suite.add("abs", gradcheck([&] { return proj(dvmvs::abs(away_from_zero)); }, {{"x", away_from_zero}}));
  suite.add("reciprocal", gradcheck([&] { return proj(reciprocal(positive)); }, {{"x", positive}}));
  suite.add("sigmoid", gradcheck([&] { return proj(sigmoid(mul_scalar(a, 3.0))); }, {{"a", a}}));
  suite.add("elu", gradcheck([&] { return proj(elu(mul_scalar(a, 3.0))); }, {{"a", a}}));
  suite.add("tanh", gradcheck([&] { return proj(dvmvs::tanh(mul_scalar(a, 3.0))); }, {{"a", a}}));
  suite.add("sum", gradcheck([&] { return sum(mul(a, a)); }, {{"a", a}}));
  suite.add("mean", gradcheck([&] { return mean(mul(a, b)); }, {{"a", a}, {"b", b}}));
  {
    std::vector<double> target(a.numel()), mask(a.numel());
    std::bernoulli_distribution keep(0.7);
    for (std::size_t i = 0; i < target.size(); ++i) {
      target[i] = a.at(i) + (i % 2 ? 0.3 : -0.3);
      mask[i] = keep(rng) ? 1.0 : 0.0;
    }
    suite.add("masked_mean_abs_diff",
              gradcheck([&] { return masked_mean_abs_diff(a, target, mask); }, {{"a", a}}));
  }
  suite.add("concat_channels",
            gradcheck([&] { return proj(concat_channels({a, b})); }, {{"a", a}, {"b", b}}));
  suite.add("slice_channels", gradcheck([&] { return proj(slice_channels(a, 1, 2)); }, {{"a", a}}));
  {
    Tensor p = random_tensor({1, 3, 4, 5}, rng), q = random_tensor({1, 3, 4, 5}, rng);
    suite.add("concat_batch",
              gradcheck([&] { return proj(concat_batch({p, q})); }, {{"p", p}, {"q", q}}));
  }
  suite.add("slice_batch", gradcheck([&] { return proj(slice_batch(a, 1)); }, {{"a", a}}));
  suite.add("reshape", gradcheck([&] { return proj(reshape(a, {2, 60})); }, {{"a", a}}));

  Tensor big = random_tensor({2, 8, 16, 16}, rng);
  for (int stride : {1, 2}) {
    ConvParams conv{random_tensor({8, 8, 3, 3}, rng, -0.3, 0.3), random_tensor({8}, rng), stride, 1};
    suite.add("conv2d stride " + std::to_string(stride),
              gradcheck([&] { return proj(conv2d(big, conv)); },
                        {{"input", big}, {"weight", conv.weight}, {"bias", conv.bias}}, 120));
  }
  {
    ConvParams conv{random_tensor({4, 8, 5, 5}, rng, -0.3, 0.3), Tensor{}, 1, 2};
    suite.add("conv2d 5x5 no bias", gradcheck([&] { return proj(conv2d(big, conv)); },
                                               {{"input", big}, {"weight", conv.weight}}, 120));
  }
  suite.add("layer_norm_spatial",
            gradcheck([&] { return proj(layer_norm_spatial(mul_scalar(a, 2.0))); }, {{"a", a}}));
  {
    Tensor input = random_tensor({2, 3, 6, 7}, rng);
    Tensor grid = random_tensor({2, 5, 4, 2}, rng, -1.5, 7.5);
    // Keep coordinates off the integer lattice, where bilinear weights kink.
    for (double& g : grid.mutable_values())
      if (std::abs(g - std::round(g)) < 0.05) g += 0.1;
    suite.add("grid_sample_bilinear", gradcheck([&] { return proj(grid_sample_bilinear(input, grid)); },
                                                {{"input", input}, {"grid", grid}}));
  }
  suite.add("upsample_nearest2x", gradcheck([&] { return proj(upsample_nearest2x(a)); }, {{"a", a}}));
  suite.add("upsample_bilinear2x", gradcheck([&] { return proj(upsample_bilinear2x(a)); }, {{"a", a}}));
  {
    Tensor even = random_tensor({2, 3, 4, 6}, rng);
    suite.add("downsample2x", gradcheck([&] { return proj(downsample2x(even)); }, {{"x", even}}));
    suite.add("subsample_nearest",
              gradcheck([&] { return proj(subsample_nearest(even, 2)); }, {{"x", even}}));
  }
  {
    Tensor s_in = random_tensor({1, 1, 3, 3}, rng, -3, 3);
    suite.add("inverse-depth regression",
              gradcheck([&] { return proj(sigmoid_to_inverse_depth(sigmoid(s_in), DepthRange{})); },
                        {{"s", s_in}}));
  }
  {
    const CameraIntrinsics k = square_camera(8);
    FeatureMap ref{random_tensor({2, 8, 8, 8}, rng), {random_pose(rng, 0.1, 0.1), random_pose(rng, 0.1, 0.1)}, k};
    FeatureMap meas{random_tensor({2, 8, 8, 8}, rng), {random_pose(rng, 0.1, 0.1), random_pose(rng, 0.1, 0.1)}, k};
    const auto planes = sample_planes(0.5, 10, 4);
    suite.add("cost volume", gradcheck([&] { return proj(build_cost_volume(ref, meas, planes).data); },
                                       {{"ref", ref.data}, {"meas", meas.data}}));
  }
  {
    const CameraIntrinsics k = square_camera(6);
    Tensor h = random_tensor({2, 3, 6, 6}, rng);
    Tensor depth = random_tensor({2, 1, 6, 6}, rng, 1.5, 4.0);
    const std::vector<Pose> prev{Pose::identity(), random_pose(rng, 0.1, 0.1)};
    const std::vector<Pose> cur{random_pose(rng, 0.1, 0.2), random_pose(rng, 0.1, 0.2)};
    suite.add("render and warp", gradcheck([&] {
                const auto partial = render_partial_depth(depth, prev, cur, k);
                return proj(warp_hidden(h, partial, prev, cur, k));
              }, {{"hidden", h}, {"depth", depth}}));
  }
  {
    DepthMap gt(4, 4, 2.0, true);
    gt.valid[3] = 0;
    gt.at(1, 2) = 0.7;
    Tensor full = random_tensor({1, 1, 4, 4}, rng, 0.1, 3.0);
    Tensor half = random_tensor({1, 1, 2, 2}, rng, 0.1, 3.0);
    suite.add("multiscale loss",
              gradcheck([&] { return multiscale_loss({half, full}, {gt}); }, {{"half", half}, {"full", full}}));
  }
}

void cell_gradients(GradSuite& suite) {
  std::mt19937_64 rng(12);
  for (int configuration = 1; configuration <= 6; ++configuration) {
    CellConfig config;
    config.kind = configuration == 6 ? CellKind::kConvGru : CellKind::kConvLstm;
    config.configuration = configuration == 6 ? 5 : configuration;
    config.channels = 8;
    FusionCell cell(config, rng);
    Tensor x0 = random_tensor({2, 8, 4, 4}, rng), x1 = random_tensor({2, 8, 4, 4}, rng);
    RecurrentState start;
    start.hidden = random_tensor({2, 8, 4, 4}, rng);
    if (config.kind == CellKind::kConvLstm) start.cell = random_tensor({2, 8, 4, 4}, rng);
    std::vector<GradcheckLeaf> leaves{{"x0", x0}, {"x1", x1}, {"h", start.hidden},
                                      {"gates", cell.gates().params().weight}};
    if (start.cell.defined()) leaves.push_back({"c", start.cell});
    if (config.kind == CellKind::kConvGru) leaves.push_back({"candidate", cell.candidate().params().weight});
    if (configuration == 3) leaves.push_back({"alpha", cell.alpha()});
    const std::string name = configuration == 6 ? "ConvGRU" : "ConvLSTM configuration " + std::to_string(configuration);
    suite.add(name + " two steps", gradcheck([&] {
                const RecurrentState s1 = cell.step(x0, start);
                const RecurrentState s2 = cell.step(x1, s1);
                Tensor loss = random_projection(s2.hidden, 5);
                if (s2.cell.defined()) loss = add(loss, random_projection(s2.cell, 6));
                return loss;
              }, leaves, 60));
  }
}

Tensor find_parameter(VideoDepthModel& model, const std::string& name) {
  for (auto& p : model.parameters())
    if (p.name == name) return *p.tensor;
  throw std::runtime_error("no parameter " + name);
}

void network_gradients(GradSuite& suite) {
  VideoDepthModel model{ModelConfig{}};
  const Sequence seq = render_sequence(generate_scene(77, 3, 0.12), "grad");
  auto view_of = [&](std::size_t i) {
    View v;
    v.image = images_to_tensor({&seq.frames[i].image});
    v.poses = {seq.frames[i].pose};
    v.intrinsics = seq.intrinsics;
    return v;
  };
  const View v0 = view_of(0), v1 = view_of(1), v2 = view_of(2);
  const std::vector<DepthMap> gt1{seq.frames[1].depth}, gt2{seq.frames[2].depth};

  // Pair network and loss: a few entries of every parameter tensor.
  std::vector<GradcheckLeaf> leaves;
  for (auto& p : model.parameters())
    if (parameter_group(p.name) != "cell") leaves.push_back({p.name, *p.tensor});
  suite.add("pair network + loss (" + std::to_string(leaves.size()) + " tensors)",
            gradcheck([&] {
              const EncodedView ref = encode_view(model, v1);
              const EncodedView meas = encode_view(model, v0);
              return multiscale_loss(pair_step(model, ref, {&meas}).output.inverse_depths, gt1);
            }, leaves, 2));
  Tensor image = v1.image.clone_leaf(true);
  View v1_leaf = v1;
  v1_leaf.image = image;
  suite.add("pair network wrt image", gradcheck([&] {
              const EncodedView ref = encode_view(model, v1_leaf);
              const EncodedView meas = encode_view(model, v0);
              return multiscale_loss(pair_step(model, ref, {&meas}).output.inverse_depths, gt1);
            }, {{"image", image}}, 20));

  // Fused step: state, cell and decoder, with the warp depth blocked.
  const EncodedView e0 = encode_view(model, v0), e1 = encode_view(model, v1), e2 = encode_view(model, v2);
  StepResult first;
  {
    NoGradGuard guard;
    first = naive_fusion_step(model, e1, {&e0}, RecurrentState{});
  }
  RecurrentState state = first.state;
  state.hidden = first.state.hidden.clone_leaf(true);
  state.cell = first.state.cell.clone_leaf(true);
  Tensor depth = first.output.depth.clone_leaf(true);
  const Prior prior{state, depth, v1.poses};
  Tensor gates = model.cell().gates().params().weight;
  Tensor regression = find_parameter(model, "decoder.refine_regression.weight");
  auto fused_loss = [&](bool block) {
    WarpOptions options;
    options.block_gradient = block;
    return multiscale_loss(fused_step(model, e2, {&e1}, prior, options).output.inverse_depths, gt2);
  };
  suite.add("fused step", gradcheck([&] { return fused_loss(true); },
                                    {{"hidden", state.hidden}, {"cell", state.cell}, {"gates", gates},
                                     {"regression", regression}}, 30));

  // Stop-gradient: blocked gives exactly zero; unblocked matches differences
  // at the samples the coarse proxy reads.
  depth.node_ptr()->grad.clear();
  fused_loss(true).backward();
  bool blocked_zero = true;
  if (depth.has_grad())
    for (double g : depth.grad()) blocked_zero = blocked_zero && g == 0.0;
  suite.add_exact("fused step: blocked warp depth has zero gradient", blocked_zero);

  depth.node_ptr()->grad.clear();
  fused_loss(false).backward();
  const std::vector<double> analytic(depth.grad().begin(), depth.grad().end());
  const int size = depth.dim(3), factor = size / state.hidden.dim(3);
  GradcheckResult unblocked;
  for (int y = factor / 2; y < size; y += factor)
    for (int x = factor / 2; x < size; x += factor) {
      const std::size_t i = static_cast<std::size_t>(y) * size + x;
      auto values = depth.mutable_values();
      const double saved = values[i];
      double up = 0.0, down = 0.0;
      {
        NoGradGuard guard;
        values[i] = saved + kGradcheckStep;
        up = fused_loss(false).item();
        values[i] = saved - kGradcheckStep;
        down = fused_loss(false).item();
      }
      values[i] = saved;
      const double err = relative_error(analytic[i], (up - down) / (2 * kGradcheckStep));
      ++unblocked.checked;
      if (err >= unblocked.max_relative_error) {
        unblocked.max_relative_error = err;
        unblocked.worst = "depth[" + std::to_string(i) + "]";
      }
    }
  double nonzero = 0.0;
  for (double g : analytic) nonzero += std::abs(g);
  suite.add("fused step: unblocked warp depth", unblocked);
  suite.add_exact("fused step: unblocked warp depth has gradient", nonzero > 0.0);
}

Outcome criterion_gradients() {
  const auto start = Clock::now();
  GradSuite suite;
  primitive_gradients(suite);
  cell_gradients(suite);
  network_gradients(suite);
  const double elapsed = seconds_since(start);
  Outcome o;
  o.pass = suite.failures.empty() && suite.worst < kGradcheckTolerance && elapsed < 300.0;
  o.detail = "max rel err " + fmt(suite.worst, 3) + " over " + std::to_string(suite.checked) +
             " entries (worst: " + suite.worst_name + "), " + fmt(elapsed, 3) + " s";
  if (!suite.failures.empty()) o.detail += "; failed: " + suite.failures.front();
  return o;
}

// ---------------------------------------------------------------------------
// 2. Analytic geometry

Outcome criterion_geometry() {
  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  expect(pose_distance(Pose::identity()) == 0.0, "identity distance");
  Pose turn;
  turn.rotation = axis_angle({0.0, 0.0, 1.0}, M_PI / 3.0);
  expect(std::abs(pose_distance(turn) - std::sqrt(2.0 / 3.0)) < 1e-12, "60 degree distance");
  expect(std::abs(keyframe_penalty(translation_pose(0.05, 0, 0)) - 0.05) < 1e-12, "penalty at 0.05");
  expect(std::abs(keyframe_penalty(translation_pose(0, 0.15, 0))) < 1e-12, "penalty at 0.15");
  expect(std::abs(keyframe_penalty(translation_pose(0, 0, 0.35)) - 0.04) < 1e-12, "penalty at 0.35");
  std::mt19937_64 rng(21);
  for (int t = 0; t < 200; ++t) {
    const Pose a = random_pose(rng), b = random_pose(rng);
    const Eigen::Matrix4d rel = oracle::relative(a.matrix(), b.matrix());
    expect(std::abs(pose_distance(relative_pose(a, b)) - oracle::pose_distance(rel)) < 1e-12, "random distance");
    expect(std::abs(keyframe_penalty(relative_pose(a, b)) - oracle::keyframe_penalty(rel)) < 1e-12,
           "random penalty");
  }
  const auto planes = sample_planes(kDefaultNear, kDefaultFar, kDefaultPlaneCount);
  expect(planes.depths.front() == 0.25 && planes.depths.back() == 20.0, "plane endpoints");
  expect(planes.depths.size() == 64, "plane count");

  double worst_px = 0.0;
  std::size_t sweep_checked = 0;
  CameraIntrinsics k;
  k.fx = 58.0;
  k.fy = 61.0;
  k.cx = 31.2;
  k.cy = 30.7;
  k.width = k.height = 64;
  for (int t = 0; t < 50; ++t) {
    const Pose meas_from_ref = random_pose(rng, 0.3, 0.4);
    const double d = planes.depths[t % planes.depths.size()];
    const auto grid = planesweep_grid(k, meas_from_ref, d);
    for (int v = 0; v < 64; v += 3)
      for (int u = 0; u < 64; u += 3) {
        const std::size_t i = (static_cast<std::size_t>(v) * 64 + u) * 2;
        const Eigen::Vector4d p((u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d, 1.0);
        if ((meas_from_ref.matrix() * p).z() <= 1e-6) continue;
        const Eigen::Vector2d o =
            oracle::sweep_pixel(k.fx, k.fy, k.cx, k.cy, meas_from_ref.matrix(), u, v, d);
        // Grazing points land far outside the image, where both forms lose digits.
        if (o.cwiseAbs().maxCoeff() > 128.0) continue;
        ++sweep_checked;
        worst_px = std::max({worst_px, std::abs(grid[i] - o.x()), std::abs(grid[i + 1] - o.y())});
      }
  }
  expect(worst_px < 1e-9, "planesweep grid");
  Outcome o;
  o.pass = failures.empty();
  o.detail = "sqrt(2/3) err " + fmt(std::abs(pose_distance(turn) - std::sqrt(2.0 / 3.0)), 3) +
             ", planes [" + fmt(planes.depths.front()) + ", " + fmt(planes.depths.back()) +
             "], sweep grid max err " + fmt(worst_px, 3) + " px over " +
             std::to_string(sweep_checked) + " in-range pixels";
  if (!failures.empty()) o.detail += "; failed: " + failures.front();
  return o;
}

// ---------------------------------------------------------------------------
// 3. Cost-volume localization

Outcome criterion_localization() {
  const auto planes = sample_planes(kDefaultNear, kDefaultFar, kDefaultPlaneCount);
  std::size_t textured = 0, correct = 0;
  double worst_rate = 1.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto r = localize_plane(seed, planes);
    textured += r.textured;
    correct += r.correct;
    worst_rate = std::min(worst_rate, r.rate());
    note("scene " + std::to_string(seed) + ": depth " + fmt(r.true_depth) + ", " +
         std::to_string(r.correct) + "/" + std::to_string(r.textured));
  }
  const double rate = textured ? static_cast<double>(correct) / textured : 0.0;
  Outcome o;
  o.pass = textured > 0 && rate >= 0.95;
  o.detail = std::to_string(correct) + "/" + std::to_string(textured) + " textured pixels (" +
             fmt(100 * rate, 4) + "%) at the nearest plane over 10 scenes, worst scene " +
             fmt(100 * worst_rate, 4) + "%, contrast threshold patch std >= " + fmt(kContrastThreshold);
  return o;
}

// ---------------------------------------------------------------------------
// 4. Warp correctness

Outcome criterion_warp() {
  std::mt19937_64 rng(31);
  std::vector<std::string> failures;
  // Identity motion.
  std::size_t identity_checked = 0;
  for (int t = 0; t < 100; ++t) {
    const int size = 2 + t % 7;
    const CameraIntrinsics k = square_camera(size);
    Tensor h = random_tensor({2, 16, size, size}, rng, -5, 5, false);
    Tensor depth = random_tensor({2, 1, size, size}, rng, 0.3, 15.0, false);
    const std::vector<Pose> poses{random_pose(rng), random_pose(rng)};
    const auto partial = render_partial_depth(depth, poses, poses, k);
    const Tensor w = warp_hidden(h, partial, poses, poses, k);
    for (std::size_t i = 0; i < h.numel(); ++i) {
      const std::size_t b = i / (16 * size * size), p = i % (size * size);
      if (!partial.covered[b * size * size + p]) continue;
      ++identity_checked;
      if (w.at(i) != h.at(i)) {
        failures.push_back("identity warp");
        break;
      }
    }
  }

  // Planar scene, camera translated along x: shift f t / d.
  double worst_shift = 0.0;
  std::size_t shift_checked = 0;
  for (int image : {64, 128, 256}) {
    CameraIntrinsics full;
    full.fx = full.fy = 0.5 * image / std::tan(M_PI / 6);
    full.cx = full.cy = 0.5 * (image - 1);
    full.width = full.height = image;
    const CameraIntrinsics k = full.downscaled(32);
    std::uniform_real_distribution<double> depth_of(1.0, 8.0), shift_of(-0.9, 0.9);
    for (int t = 0; t < 50; ++t) {
      const double d = depth_of(rng);
      const double tx = shift_of(rng) * d / k.fx;  // under one bottleneck pixel
      const Pose prev = random_pose(rng, 0.5, 1.0);
      Pose cur = prev;
      cur.translation += prev.rotation * Eigen::Vector3d(tx, 0, 0);
      const auto partial = render_partial_depth(DepthMap(k.width, k.height, d, true), prev, cur, k);
      const Tensor grid = warp_grid(partial, {prev}, {cur}, k);
      for (int v = 0; v < k.height; ++v)
        for (int u = 0; u < k.width; ++u) {
          const std::size_t i = static_cast<std::size_t>(v) * k.width + u;
          if (!partial.covered[i]) continue;
          const double expected = k.fx * tx / d;
          worst_shift = std::max({worst_shift, std::abs(grid.at(2 * i) - u - expected),
                                  std::abs(grid.at(2 * i + 1) - v)});
          ++shift_checked;
        }
    }
  }
  if (worst_shift >= 0.5 || shift_checked == 0) failures.push_back("translation shift");

  // Collisions: two points placed k1 and k2 columns right of a target land
  // on it exactly after the camera moves right; the nearer must win.
  std::size_t collisions = 0, kept_nearer = 0;
  for (int t = 0; t < 1000; ++t) {
    const int size = 8;
    CameraIntrinsics k = square_camera(size);
    std::uniform_int_distribution<int> column(0, 3), row(0, size - 1), disparity(1, 4);
    const int target = column(rng), v = row(rng);
    int k1 = disparity(rng), k2 = disparity(rng);
    while (k2 == k1) k2 = disparity(rng);
    if (k1 < k2) std::swap(k1, k2);  // larger disparity is nearer
    const double tx = std::uniform_real_distribution<double>(0.05, 0.5)(rng);
    const double d_near = k.fx * tx / k1, d_far = k.fx * tx / k2;
    DepthMap prev(size, size, 0.0, false);
    prev.at(target + k1, v) = d_near;
    prev.valid[v * size + target + k1] = 1;
    prev.at(target + k2, v) = d_far;
    prev.valid[v * size + target + k2] = 1;
    const auto partial = render_partial_depth(prev, Pose::identity(), translation_pose(tx, 0, 0), k);
    ++collisions;
    const std::size_t i = static_cast<std::size_t>(v) * size + target;
    if (partial.covered[i] && std::abs(partial.depth.at(i) - d_near) < 1e-9 * d_near &&
        partial.covered_count() == 1)
      ++kept_nearer;
  }
  if (kept_nearer != collisions) failures.push_back("z-buffer");

  Outcome o;
  o.pass = failures.empty() && identity_checked > 0;
  o.detail = "identity exact on " + std::to_string(identity_checked) + " entries; shift max err " +
             fmt(worst_shift, 3) + " px over " + std::to_string(shift_checked) + " pixels; z-buffer " +
             std::to_string(kept_nearer) + "/" + std::to_string(collisions) + " collisions";
  if (!failures.empty()) o.detail += "; failed: " + failures.front();
  return o;
}

// ---------------------------------------------------------------------------
// 5 and 9. Desk-scale training comparison

struct ExperimentSettings {
  int train_scenes = 20;
  int validation_scenes = 3;
  int test_scenes = 5;
  int train_frames = 40;
  int test_frames = 30;
  double step = 0.12;
  double min_rotation_share = 0.5;
  double max_rotation_share = 0.9;
  double learning_rate = 1e-3;
  StageBudgets budgets{300, 100, 50, 50, 50};
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct Experiment {
  ExperimentSettings settings;
  std::vector<Sequence> train, validation, test;
  std::vector<double> pair, naive, warped;
  std::unique_ptr<VideoDepthModel> warped_model;  // first seed
  double training_seconds = 0.0;
  bool done = false;

  void make_data() {
    SceneConfig sc;
    sc.min_rotation_share = settings.min_rotation_share;
    sc.max_rotation_share = settings.max_rotation_share;
    auto render = [&](int count, std::uint64_t base, int frames, const char* prefix) {
      std::vector<Sequence> out;
      for (int i = 0; i < count; ++i)
        out.push_back(render_sequence(generate_scene(base + i, frames, settings.step, sc),
                                      prefix + std::to_string(i)));
      return out;
    };
    train = render(settings.train_scenes, 1000, settings.train_frames, "train");
    validation = render(settings.validation_scenes, 2000, settings.train_frames, "val");
    test = render(settings.test_scenes, 3000, settings.test_frames, "test");
  }

  TrainingConfig config(std::uint64_t seed, FusionMode mode) const {
    TrainingConfig c;
    c.seed = seed;
    c.model.seed = seed;
    c.fusion = mode;
    c.batch_size = 4;
    c.sampling.length = 8;
    c.learning_rate = settings.learning_rate;
    c.finetune_learning_rate = settings.learning_rate / 2;
    c.budgets = settings.budgets;
    c.validation_subsequences = 4;
    c.augment.range = c.model.range;
    return c;
  }

  double abs_inv(const VideoDepthModel& model, FusionMode mode, std::size_t k = 1) const {
    InferenceOptions options;
    options.mode = mode;
    options.measurements = k;
    const auto report = evaluate_online(test, model, options);
    if (!report) throw std::runtime_error("no valid test pixels");
    return report->abs_inv;
  }

  void run(std::size_t seed_count) {
    make_data();
    for (std::size_t s = 0; s < seed_count; ++s) {
      const std::uint64_t seed = settings.seeds[s];
      const auto start = Clock::now();
      TrainingConfig pair_config = config(seed, FusionMode::kPair);
      pair_config.validation_interval = std::max(1, settings.budgets.pair / 4);
      VideoDepthModel pair_model(pair_config.model);
      run_training(pair_model, make_stages(FusionMode::kPair, settings.budgets, settings.learning_rate,
                                           settings.learning_rate / 2),
                   pair_config, train, validation);
      double trained = seconds_since(start);
      pair.push_back(abs_inv(pair_model, FusionMode::kPair));
      for (FusionMode mode : {FusionMode::kNaive, FusionMode::kWarped}) {
        const auto t0 = Clock::now();
        TrainingConfig c = config(seed, mode);
        c.validation_interval = std::max(1, settings.budgets.cell_decoder / 4);
        VideoDepthModel model = pair_model.clone();
        run_training(model, make_stages(mode, settings.budgets, c.learning_rate, c.finetune_learning_rate, false),
                     c, train, validation);
        trained += seconds_since(t0);
        (mode == FusionMode::kNaive ? naive : warped).push_back(abs_inv(model, mode));
        if (mode == FusionMode::kWarped && !warped_model)
          warped_model = std::make_unique<VideoDepthModel>(model.clone());
      }
      training_seconds += trained;
      note("seed " + std::to_string(seed) + ": pair " + fmt(pair.back()) + " naive " + fmt(naive.back()) +
           " warped " + fmt(warped.back()) + " (" + fmt(trained, 4) + " s training)");
    }
    done = true;
  }
};

double average(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / v.size();
}

Outcome criterion_ordering(Experiment& e) {
  if (!e.done) e.run(e.settings.seeds.size());
  const double p = average(e.pair), n = average(e.naive), w = average(e.warped);
  const double below_pair = (p - w) / p, below_naive = (n - w) / n;
  Outcome o;
  o.pass = w < n && n < p && below_pair >= 0.05 && below_naive >= 0.02 &&
           e.training_seconds < 2 * 3600.0;
  o.detail = "abs-inv over " + std::to_string(e.pair.size()) + " seeds: pair " + fmt(p) + ", naive " +
             fmt(n) + ", warped " + fmt(w) + " (warped " + fmt(100 * below_pair, 3) + "% below pair, " +
             fmt(100 * below_naive, 3) + "% below naive); training " + fmt(e.training_seconds / 60, 3) +
             " min";
  return o;
}

// ---------------------------------------------------------------------------
// 6. Stability

struct Magnitude {
  double max_abs = 0.0;
  bool finite = true;
  int steps = 0;
};

Magnitude run_cell(int configuration, int steps, bool loop, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  CellConfig config;
  config.configuration = configuration;
  FusionCell cell(config, rng);
  const int size = 2;
  std::vector<Tensor> inputs;
  for (int i = 0; i < (loop ? 8 : steps); ++i)
    inputs.push_back(random_tensor({1, config.channels, size, size}, rng, 0.0, 1.0, false));
  RecurrentState state = zero_state(config, 1, size, size);
  Magnitude m;
  NoGradGuard guard;
  for (int t = 0; t < steps; ++t) {
    // The loop test replays one short sequence forward and back.
    std::size_t index = t;
    if (loop) {
      const int period = 2 * static_cast<int>(inputs.size()) - 2;
      const int phase = t % period;
      index = phase < static_cast<int>(inputs.size()) ? phase : period - phase;
    }
    state = cell.step(inputs[index], state);
    for (const Tensor* x : {&state.hidden, &state.cell})
      for (double v : x->values()) {
        if (!std::isfinite(v)) m.finite = false;
        m.max_abs = std::max(m.max_abs, std::abs(v));
      }
    m.steps = t + 1;
    if (!m.finite || m.max_abs >= 1e3) break;
  }
  return m;
}

Outcome criterion_stability() {
  const Magnitude noise5 = run_cell(5, 200, false, 41);
  const Magnitude loop5 = run_cell(5, 10000, true, 42);
  std::string c1;
  bool c1_ran = true;
  try {
    const Magnitude noise1 = run_cell(1, 200, false, 41);
    const Magnitude loop1 = run_cell(1, 10000, true, 42);
    auto describe = [](const Magnitude& m, int steps) {
      if (!m.finite || m.max_abs >= 1e3)
        return std::string("diverged at step ") + std::to_string(m.steps);
      return "max " + fmt(m.max_abs, 3) + " over " + std::to_string(steps) + " steps";
    };
    c1 = "configuration 1 noise " + describe(noise1, 200) + ", loop " + describe(loop1, 10000);
  } catch (const std::exception& ex) {
    c1_ran = false;
    c1 = std::string("configuration 1 threw: ") + ex.what();
  }
  const bool ok5 = noise5.finite && loop5.finite && noise5.max_abs < 1e3 && loop5.max_abs < 1e3 &&
                   noise5.steps == 200 && loop5.steps == 10000;
  Outcome o;
  o.pass = ok5 && c1_ran;
  o.detail = "configuration 5 noise max " + fmt(noise5.max_abs, 3) + " (" + std::to_string(noise5.steps) +
             " steps), loop max " + fmt(loop5.max_abs, 3) + " (" + std::to_string(loop5.steps) + " steps); " + c1;
  return o;
}

// ---------------------------------------------------------------------------
// 7. Frame selection

Outcome criterion_selection() {
  std::mt19937_64 rng(51);
  std::size_t admissions = 0, decisions = 0, selections = 0, max_size = 0;
  std::vector<std::string> failures;
  std::uniform_real_distribution<double> step_size(0.0, 0.25), unit(-1.0, 1.0);
  std::uniform_int_distribution<int> length(20, 120);
  for (int trajectory = 0; trajectory < 1000 && failures.empty(); ++trajectory) {
    KeyframeBuffer buffer;
    std::vector<Eigen::Matrix4d> kept;
    Pose pose = random_pose(rng);
    const int frames = length(rng);
    for (int i = 0; i < frames; ++i) {
      // Mix of small and large motions, some frames repeating the last pose.
      if (i > 0 && unit(rng) > -0.8) {
        const double s = step_size(rng);
        Eigen::Vector3d axis(unit(rng), unit(rng), unit(rng));
        Pose delta;
        delta.rotation = axis_angle(axis.normalized(), s * unit(rng));
        delta.translation = Eigen::Vector3d(unit(rng), unit(rng), unit(rng)).normalized() * s * std::abs(unit(rng));
        pose = pose * delta;
      }
      const Eigen::Matrix4d m = pose.matrix();
      const std::size_t k = 1 + i % 3;
      const auto chosen = select_measurements(buffer, pose, k);
      const auto order = oracle::rank_by_penalty(kept, m);
      const std::size_t expected = std::min(k, kept.size());
      if (chosen.size() != expected) failures.push_back("selection size");
      for (std::size_t j = 0; j < chosen.size() && j < expected; ++j)
        if (chosen[j] != &buffer.keyframes()[order[j]]) failures.push_back("selection order");
      ++selections;

      const bool admit = kept.empty() || oracle::pose_distance(oracle::relative(kept.back(), m)) > 0.1;
      const bool added = buffer.update(i, pose);
      if (added != admit) failures.push_back("admission at frame " + std::to_string(i));
      if (added) {
        kept.push_back(m);
        if (kept.size() > 30) kept.erase(kept.begin());
        ++admissions;
      }
      ++decisions;
      max_size = std::max(max_size, buffer.size());
      if (buffer.size() > 30) failures.push_back("capacity");
    }
  }
  Outcome o;
  o.pass = failures.empty();
  o.detail = std::to_string(decisions) + " admission decisions (" + std::to_string(admissions) +
             " admitted), " + std::to_string(selections) + " selections match brute force; max buffer " +
             std::to_string(max_size);
  if (!failures.empty()) o.detail += "; failed: " + failures.front();
  return o;
}

// ---------------------------------------------------------------------------
// 8. Metrics

Outcome criterion_metrics() {
  std::vector<std::string> failures;
  DepthMap one_gt(1, 1, 1.0, true), one_pred(1, 1, 2.0, true);
  const auto worked = compute_metrics(one_pred, one_gt);
  if (!worked || worked->abs != 1.0 || worked->abs_rel != 1.0 || worked->abs_inv != 0.5 ||
      worked->inlier != 0.0)
    failures.push_back("worked example");
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> gt_depth(0.1, 10.0), pred_depth(0.25, 20.0), unit(0.0, 1.0);
  double worst = 0.0;
  std::size_t masked = 0;
  for (int t = 0; t < 100; ++t) {
    DepthMap gt(32, 24, 0.0, true), pred(32, 24, 0.0, true);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt.values[i] = gt_depth(rng);
      // Half the predictions are close to the groundtruth so inliers occur.
      pred.values[i] = unit(rng) < 0.5 ? gt.values[i] * (0.8 + 0.4 * unit(rng)) : pred_depth(rng);
      if (unit(rng) < 0.1) gt.valid[i] = 0;
      if (gt.valid[i] && gt.values[i] < 0.5) ++masked;
    }
    const auto got = compute_metrics(pred, gt);
    const auto want = oracle::metrics(pred, gt, 0.5);
    if (got.has_value() != want.has_value() || (got && got->count != want->count)) {
      failures.push_back("pixel count");
      continue;
    }
    if (!got) continue;
    for (auto [a, b] : {std::pair{got->abs, want->abs}, {got->abs_rel, want->abs_rel},
                        {got->abs_inv, want->abs_inv}, {got->inlier, want->inlier}})
      worst = std::max(worst, std::abs(a - b));
  }
  if (worst >= 1e-9) failures.push_back("oracle agreement");
  Outcome o;
  o.pass = failures.empty() && masked > 0;
  o.detail = "worked example abs 1 / abs-rel 1 / abs-inv 0.5 / inlier 0; 100 random pairs max diff " +
             fmt(worst, 3) + ", " + std::to_string(masked) + " valid pixels below 0.5 m masked";
  if (!failures.empty()) o.detail += "; failed: " + failures.front();
  return o;
}

// ---------------------------------------------------------------------------
// 9. Multi-measurement mode

Outcome criterion_measurements(Experiment& e) {
  if (!e.done) e.run(1);
  const VideoDepthModel& model = *e.warped_model;
  const double k1 = e.abs_inv(model, FusionMode::kWarped, 1);
  const double k2 = e.abs_inv(model, FusionMode::kWarped, 2);
  const double k3 = e.abs_inv(model, FusionMode::kWarped, 3);
  Outcome o;
  o.pass = std::isfinite(k3) && k2 <= k1 + 1e-4;
  o.detail = "warped abs-inv k=1 " + fmt(k1, 5) + ", k=2 " + fmt(k2, 5) + ", k=3 " + fmt(k3, 5);
  return o;
}

// ---------------------------------------------------------------------------
// 10. Determinism and persistence

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string command = std::string(DVMVS_CLI_PATH) + " " + args + " >> " + log.string() + " 2>&1";
  const int status = std::system(command.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome criterion_determinism(const fs::path& work) {
  const fs::path root = work / "determinism";
  fs::remove_all(root);
  std::vector<std::string> failures;
  for (const char* run : {"a", "b"}) {
    const fs::path dir = root / run;
    fs::create_directories(dir);
    const fs::path log = dir / "log.txt";
    std::ofstream(dir / "train.ini") << "seed = 4\nfusion = warped\nbatch_size = 2\nsubsequence_length = 3\n"
                                        "validation_interval = 1\nvalidation_subsequences = 2\n"
                                        "learning_rate = 0.001\ntrain_data = train\nvalidation_data = val\n"
                                        "output = out\n[iterations]\npair = 2\ncell_decoder = 1\n"
                                        "encoder_fpn = 1\nfull = 1\ncell_finetune = 1\n";
    bool ok = run_cli("synth -o " + (dir / "train").string() + " --seed 4 --scenes 2 --frames 8 --step 0.05", log) == 0 &&
              run_cli("synth -o " + (dir / "val").string() + " --seed 5 --scenes 1 --frames 8 --step 0.05", log) == 0 &&
              run_cli("synth -o " + (dir / "test").string() + " --seed 6 --scenes 1 --frames 5", log) == 0 &&
              run_cli("train -c " + (dir / "train.ini").string(), log) == 0 &&
              run_cli("infer -d " + (dir / "test").string() + " -o " + (dir / "pred").string() +
                          " --checkpoint " + (dir / "out" / "model.ckpt").string() + " -k 2",
                      log) == 0 &&
              run_cli("eval -p " + (dir / "pred").string() + " -g " + (dir / "test").string() + " -r " +
                          (dir / "report.json").string() + " --seed 4 --config " + (dir / "train.ini").string(),
                      log) == 0;
    if (!ok) failures.push_back(std::string("pipeline run ") + run + " (see " + log.string() + ")");
  }
  const std::string report_a = read_bytes(root / "a" / "report.json");
  const bool reports_equal = failures.empty() && !report_a.empty() && report_a == read_bytes(root / "b" / "report.json");
  const bool checkpoints_equal = failures.empty() && read_bytes(root / "a" / "out" / "model.ckpt") ==
                                                         read_bytes(root / "b" / "out" / "model.ckpt");
  if (failures.empty() && !reports_equal) failures.push_back("reports differ");
  if (failures.empty() && !checkpoints_equal) failures.push_back("checkpoints differ");

  // Save, load into a differently initialized model, save again.
  bool round_trip = false;
  {
    ModelConfig c;
    c.seed = 9;
    VideoDepthModel original(c);
    const fs::path first = root / "first.ckpt", second = root / "second.ckpt";
    save_model(first, original);
    c.seed = 10;
    VideoDepthModel loaded(c);
    load_model(first, loaded);
    save_model(second, loaded);
    round_trip = read_bytes(first) == read_bytes(second);
    auto a = original.parameters();
    auto b = loaded.parameters();
    for (std::size_t i = 0; i < a.size() && round_trip; ++i) {
      const auto va = a[i].tensor->values(), vb = b[i].tensor->values();
      round_trip = std::equal(va.begin(), va.end(), vb.begin(), vb.end());
    }
  }
  if (!round_trip) failures.push_back("checkpoint round trip");
  Outcome o;
  o.pass = failures.empty();
  o.detail = std::string("two synth->train->infer->eval runs: reports ") +
             (reports_equal ? "bit-identical" : "differ") + ", checkpoints " +
             (checkpoints_equal ? "bit-identical" : "differ") + "; save/load round trip " +
             (round_trip ? "bit-exact" : "not exact");
  if (!failures.empty()) o.detail += "; failed: " + failures.front();
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "dvmvs_acceptance").string();
  std::size_t seeds = 3;
  app.add_option("--only", only, "criteria to run (default all)")->delimiter(',');
  app.add_option("--work", work, "scratch directory");
  app.add_option("--seeds", seeds, "training seeds for the ordering criterion")->check(CLI::Range(1, 3));
  app.add_flag("--verbose,-v", verbose, "print per-check details");
  CLI11_PARSE(app, argc, argv);

  Experiment experiment;
  experiment.settings.seeds.resize(seeds);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", criterion_gradients},
      {"analytic geometry", criterion_geometry},
      {"cost-volume localization", criterion_localization},
      {"warp correctness", criterion_warp},
      {"fusion ordering at desk scale", [&] { return criterion_ordering(experiment); }},
      {"cell stability", criterion_stability},
      {"frame selection", criterion_selection},
      {"metrics oracle", criterion_metrics},
      {"multi-measurement mode", [&] { return criterion_measurements(experiment); }},
      {"determinism and persistence", [&] { return criterion_determinism(work); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(number)) continue;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << number << " (" << criteria[i].first
              << "): " << o.detail << " [" << fmt(seconds_since(start), 4) << " s]" << std::endl;
  }
  return failed;
}
