#include "dvmvs/training.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

namespace dvmvs {

// ---------------------------------------------------------------------------
// Subsequence sampling

SamplingThresholds draw_thresholds(const SamplingConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pose(config.pose_distance - config.pose_distance_spread,
                                              config.pose_distance + config.pose_distance_spread);
  std::uniform_real_distribution<double> translation(
      config.translation - config.translation_spread,
      config.translation + config.translation_spread);
  SamplingThresholds t;
  t.pose_distance = pose(rng);
  t.translation = translation(rng);
  return t;
}

std::optional<std::vector<std::size_t>> subsequence_from(const std::vector<Pose>& poses,
                                                         std::size_t start, std::size_t length,
                                                         const SamplingThresholds& thresholds) {
  if (length == 0 || start >= poses.size()) return std::nullopt;
  std::vector<std::size_t> picked{start};
  std::size_t current = start;
  while (picked.size() < length) {
    std::optional<std::size_t> next;
    for (std::size_t j = current + 1; j < poses.size(); ++j) {
      const Pose rel = relative_pose(poses[current], poses[j]);
      if (pose_distance(rel) > thresholds.pose_distance ||
          rel.translation.norm() > thresholds.translation) {
        break;
      }
      next = j;
    }
    if (!next) return std::nullopt;
    picked.push_back(*next);
    current = *next;
  }
  return picked;
}

std::optional<std::vector<std::size_t>> sample_subsequence(const Sequence& sequence,
                                                           const SamplingConfig& config,
                                                           std::mt19937_64& rng) {
  if (sequence.frames.size() < config.length) return std::nullopt;
  std::vector<Pose> poses;
  poses.reserve(sequence.frames.size());
  for (const Frame& f : sequence.frames) poses.push_back(f.pose);
  std::uniform_int_distribution<std::size_t> start(0, poses.size() - config.length);
  for (int attempt = 0; attempt < config.retries; ++attempt) {
    const SamplingThresholds thresholds = draw_thresholds(config, rng);
    auto picked = subsequence_from(poses, start(rng), config.length, thresholds);
    if (picked) return picked;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Scale augmentation

ScaleBounds effective_scale_bounds(const std::vector<Frame>& frames,
                                   const AugmentConfig& config) {
  double lowest = std::numeric_limits<double>::infinity();
  double highest = 0.0;
  for (const Frame& f : frames) {
    for (std::size_t i = 0; i < f.depth.size(); ++i) {
      const double d = f.depth.values[i];
      if (!f.depth.valid[i] || !(d > 0.0)) continue;
      lowest = std::min(lowest, d);
      highest = std::max(highest, d);
    }
  }
  ScaleBounds bounds{config.min_scale, config.max_scale};
  if (highest > 0.0) {
    bounds.low = std::max(config.min_scale, config.range.near / lowest);
    bounds.high = std::min(config.max_scale, config.range.far / highest);
  }
  return bounds;
}

void apply_scale(std::vector<Frame>& frames, double s) {
  for (Frame& f : frames) {
    for (double& d : f.depth.values) d *= s;
    f.pose.translation *= s;
  }
}

double scale_augment(std::vector<Frame>& frames, const AugmentConfig& config,
                     std::mt19937_64& rng) {
  const ScaleBounds bounds = effective_scale_bounds(frames, config);
  if (bounds.empty()) return 1.0;
  std::uniform_real_distribution<double> draw(bounds.low, bounds.high);
  const double s = bounds.low == bounds.high ? bounds.low : draw(rng);
  apply_scale(frames, s);
  return s;
}

// ---------------------------------------------------------------------------
// Optimizer

Adam::Adam(ParameterList parameters, double learning_rate, double beta1, double beta2,
           double epsilon)
    : parameters_(std::move(parameters)),
      lr_(learning_rate),
      beta1_(beta1),
      beta2_(beta2),
      epsilon_(epsilon) {
  for (const auto& p : parameters_) {
    m_.emplace_back(p.tensor->numel(), 0.0);
    v_.emplace_back(p.tensor->numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < parameters_.size(); ++k) {
    Tensor& p = *parameters_[k].tensor;
    if (!p.requires_grad() || !p.has_grad()) continue;
    const auto g = p.grad();
    auto values = p.mutable_values();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      values[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + epsilon_);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : parameters_) p.tensor->zero_grad();
}

// ---------------------------------------------------------------------------
// Stages

const char* to_string(StageId id) {
  switch (id) {
    case StageId::kPair: return "pair";
    case StageId::kCellDecoder: return "cell_decoder";
    case StageId::kEncoderFpn: return "encoder_fpn";
    case StageId::kFull: return "full";
    case StageId::kCellFinetune: return "cell_finetune";
  }
  return "?";
}

std::vector<TrainStage> make_stages(FusionMode mode, const StageBudgets& budgets,
                                    double learning_rate, double finetune_learning_rate,
                                    bool include_pair) {
  std::vector<TrainStage> stages;
  if (include_pair || mode == FusionMode::kPair) {
    stages.push_back({StageId::kPair, {"extractor", "fpn", "encoder", "decoder"}, learning_rate,
                      budgets.pair, WarpSource::kGroundtruth});
  }
  if (mode == FusionMode::kPair) return stages;
  stages.push_back({StageId::kCellDecoder, {"cell", "decoder"}, learning_rate,
                    budgets.cell_decoder, WarpSource::kGroundtruth});
  stages.push_back({StageId::kEncoderFpn, {"cell", "decoder", "encoder", "fpn"}, learning_rate,
                    budgets.encoder_fpn, WarpSource::kGroundtruth});
  stages.push_back({StageId::kFull, {"cell", "decoder", "encoder", "fpn", "extractor"},
                    learning_rate, budgets.full, WarpSource::kGroundtruth});
  stages.push_back({StageId::kCellFinetune, {"cell"}, finetune_learning_rate,
                    budgets.cell_finetune, WarpSource::kPrediction});
  return stages;
}

// ---------------------------------------------------------------------------
// Config file

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "seed", "fusion", "measurements", "image_size", "planes", "near", "far",
      "cell_configuration", "cell_kind", "batch_size", "subsequence_length", "augmentation",
      "symmetric_pair", "learning_rate", "finetune_learning_rate", "validation_interval",
      "validation_subsequences", "train_data", "validation_data", "output",
      "iterations.pair", "iterations.cell_decoder", "iterations.encoder_fpn",
      "iterations.full", "iterations.cell_finetune"};
  return keys;
}

void check_keys(const boost::property_tree::ptree& tree, const std::string& prefix) {
  for (const auto& [key, child] : tree) {
    const std::string full = prefix.empty() ? key : prefix + "." + key;
    if (!child.empty()) {
      check_keys(child, full);
    } else if (!known_keys().contains(full)) {
      throw ConfigError("unknown config key '" + full + "'");
    }
  }
}

template <typename T>
T get_value(const boost::property_tree::ptree& tree, const std::string& key, T fallback) {
  const auto node = tree.get_child_optional(key);
  if (!node) return fallback;
  try {
    return node->get_value<T>();
  } catch (const boost::property_tree::ptree_bad_data&) {
    throw ConfigError("config key '" + key + "' has a malformed value '" + node->data() + "'");
  }
}

}  // namespace

TrainingConfig parse_training_config(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax error: ") + e.what());
  }
  check_keys(tree, "");
  TrainingConfig c;
  c.seed = get_value<std::uint64_t>(tree, "seed", c.seed);
  try {
    c.fusion = parse_fusion_mode(get_value<std::string>(tree, "fusion", to_string(c.fusion)));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.measurements = get_value<std::size_t>(tree, "measurements", c.measurements);
  c.image_size = get_value<int>(tree, "image_size", c.image_size);
  c.model.plane_count = get_value<int>(tree, "planes", c.model.plane_count);
  c.model.range.near = get_value<double>(tree, "near", c.model.range.near);
  c.model.range.far = get_value<double>(tree, "far", c.model.range.far);
  c.model.cell.configuration =
      get_value<int>(tree, "cell_configuration", c.model.cell.configuration);
  const std::string kind = get_value<std::string>(tree, "cell_kind", "convlstm");
  if (kind == "convlstm") {
    c.model.cell.kind = CellKind::kConvLstm;
  } else if (kind == "convgru") {
    c.model.cell.kind = CellKind::kConvGru;
  } else {
    throw ConfigError("cell_kind must be convlstm or convgru");
  }
  c.batch_size = get_value<std::size_t>(tree, "batch_size", c.batch_size);
  c.sampling.length = get_value<std::size_t>(tree, "subsequence_length", c.sampling.length);
  c.augmentation = get_value<bool>(tree, "augmentation", c.augmentation);
  c.symmetric_pair = get_value<bool>(tree, "symmetric_pair", c.symmetric_pair);
  c.learning_rate = get_value<double>(tree, "learning_rate", c.learning_rate);
  c.finetune_learning_rate =
      get_value<double>(tree, "finetune_learning_rate", c.finetune_learning_rate);
  c.validation_interval = get_value<int>(tree, "validation_interval", c.validation_interval);
  c.validation_subsequences =
      get_value<std::size_t>(tree, "validation_subsequences", c.validation_subsequences);
  c.train_data = get_value<std::string>(tree, "train_data", c.train_data);
  c.validation_data = get_value<std::string>(tree, "validation_data", c.validation_data);
  c.output = get_value<std::string>(tree, "output", c.output);
  c.budgets.pair = get_value<int>(tree, "iterations.pair", c.budgets.pair);
  c.budgets.cell_decoder = get_value<int>(tree, "iterations.cell_decoder", c.budgets.cell_decoder);
  c.budgets.encoder_fpn = get_value<int>(tree, "iterations.encoder_fpn", c.budgets.encoder_fpn);
  c.budgets.full = get_value<int>(tree, "iterations.full", c.budgets.full);
  c.budgets.cell_finetune =
      get_value<int>(tree, "iterations.cell_finetune", c.budgets.cell_finetune);

  if (c.measurements == 0) throw ConfigError("measurements must be at least 1");
  if (c.image_size <= 0 || c.image_size % 64 != 0) {
    throw ConfigError("image_size must be a positive multiple of 64");
  }
  if (c.model.plane_count < 2) throw ConfigError("planes must be at least 2");
  if (!(c.model.range.near > 0.0) || !(c.model.range.far > c.model.range.near)) {
    throw ConfigError("need 0 < near < far");
  }
  if (c.model.cell.configuration < 1 || c.model.cell.configuration > 5) {
    throw ConfigError("cell_configuration must be in 1..5");
  }
  if (c.batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (c.sampling.length < 2) throw ConfigError("subsequence_length must be at least 2");
  if (!(c.learning_rate > 0.0) || !(c.finetune_learning_rate > 0.0)) {
    throw ConfigError("learning rates must be positive");
  }
  for (int budget : {c.budgets.pair, c.budgets.cell_decoder, c.budgets.encoder_fpn,
                     c.budgets.full, c.budgets.cell_finetune}) {
    if (budget < 0) throw ConfigError("iteration budgets must not be negative");
  }
  if (c.validation_interval <= 0) throw ConfigError("validation_interval must be positive");
  c.model.seed = c.seed;
  c.augment.range = c.model.range;
  return c;
}

TrainingConfig load_training_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_training_config(text.str());
}

std::string canonical_config(const TrainingConfig& c) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "seed=" << c.seed << "\nfusion=" << to_string(c.fusion)
      << "\nmeasurements=" << c.measurements << "\nimage_size=" << c.image_size
      << "\nplanes=" << c.model.plane_count << "\nnear=" << c.model.range.near
      << "\nfar=" << c.model.range.far << "\ncell_kind="
      << (c.model.cell.kind == CellKind::kConvLstm ? "convlstm" : "convgru")
      << "\ncell_configuration=" << c.model.cell.configuration
      << "\nbatch_size=" << c.batch_size << "\nsubsequence_length=" << c.sampling.length
      << "\naugmentation=" << c.augmentation << "\nsymmetric_pair=" << c.symmetric_pair
      << "\nlearning_rate=" << c.learning_rate
      << "\nfinetune_learning_rate=" << c.finetune_learning_rate
      << "\nvalidation_interval=" << c.validation_interval
      << "\nvalidation_subsequences=" << c.validation_subsequences
      << "\niterations=" << c.budgets.pair << ',' << c.budgets.cell_decoder << ','
      << c.budgets.encoder_fpn << ',' << c.budgets.full << ',' << c.budgets.cell_finetune
      << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Batches and losses

TrainingBatch sample_batch(const std::vector<Sequence>& sequences, const TrainingConfig& config,
                           std::mt19937_64& rng, bool augment) {
  if (sequences.empty()) throw ContractViolation("sample_batch: no sequences");
  const std::size_t length = config.sampling.length;
  AugmentConfig augment_config = config.augment;
  augment_config.range = config.model.range;
  std::uniform_int_distribution<std::size_t> pick(0, sequences.size() - 1);
  std::vector<std::vector<Frame>> chosen;
  const CameraIntrinsics& intrinsics = sequences.front().intrinsics;
  for (std::size_t b = 0; b < config.batch_size; ++b) {
    bool found = false;
    for (int attempt = 0; attempt < 100 && !found; ++attempt) {
      const Sequence& sequence = sequences[pick(rng)];
      const auto indices = sample_subsequence(sequence, config.sampling, rng);
      if (!indices) continue;
      if (sequence.intrinsics.matrix() != intrinsics.matrix() ||
          sequence.intrinsics.width != intrinsics.width ||
          sequence.intrinsics.height != intrinsics.height) {
        throw ContractViolation("sample_batch: sequences must share intrinsics");
      }
      std::vector<Frame> frames;
      for (std::size_t i : *indices) frames.push_back(sequence.frames[i]);
      if (augment) scale_augment(frames, augment_config, rng);
      chosen.push_back(std::move(frames));
      found = true;
    }
    if (!found) {
      throw std::runtime_error("sample_batch: no sequence yields an admissible subsequence");
    }
  }
  TrainingBatch batch;
  for (std::size_t t = 0; t < length; ++t) {
    std::vector<const RgbImage*> images;
    View view;
    view.intrinsics = intrinsics;
    std::vector<DepthMap> depths;
    for (const auto& frames : chosen) {
      images.push_back(&frames[t].image);
      view.poses.push_back(frames[t].pose);
      depths.push_back(frames[t].depth);
    }
    view.image = images_to_tensor(images);
    batch.views.push_back(std::move(view));
    batch.depths.push_back(std::move(depths));
  }
  return batch;
}

namespace {

Tensor pair_loss(const VideoDepthModel& model, const std::vector<EncodedView>& encoded,
                 const TrainingBatch& batch, std::size_t reference, std::size_t measurement) {
  const StepResult r = pair_step(model, encoded[reference], {&encoded[measurement]});
  return multiscale_loss(r.output.inverse_depths, batch.depths[reference]);
}

}  // namespace

Tensor batch_loss(const VideoDepthModel& model, const TrainingBatch& batch, FusionMode mode,
                  const TrainStage& stage, bool symmetric_pair, std::mt19937_64& rng) {
  const std::size_t length = batch.views.size();
  if (length < 2) throw ContractViolation("batch_loss: subsequences need two frames");
  if (stage.id == StageId::kPair) {
    std::uniform_int_distribution<std::size_t> pick(1, length - 1);
    const std::size_t t = pick(rng);
    std::vector<EncodedView> encoded(length);
    encoded[t] = encode_view(model, batch.views[t]);
    encoded[t - 1] = encode_view(model, batch.views[t - 1]);
    Tensor loss = pair_loss(model, encoded, batch, t, t - 1);
    if (symmetric_pair) {
      loss = mul_scalar(loss + pair_loss(model, encoded, batch, t - 1, t), 0.5);
    }
    return loss;
  }
  std::vector<EncodedView> encoded;
  encoded.reserve(length);
  for (const View& view : batch.views) encoded.push_back(encode_view(model, view));
  RecurrentState state;
  Tensor previous_depth;
  std::vector<Pose> previous_poses;
  Tensor total;
  for (std::size_t t = 0; t < length; ++t) {
    const std::size_t m = t == 0 ? 1 : t - 1;
    StepResult r;
    if (mode == FusionMode::kNaive) {
      r = naive_fusion_step(model, encoded[t], {&encoded[m]}, state);
    } else {
      const Prior prior{state, previous_depth, previous_poses};
      WarpOptions options;
      options.source = stage.warp_source;
      options.groundtruth = &batch.depths[t];
      options.block_gradient = true;
      r = fused_step(model, encoded[t], {&encoded[m]}, prior, options);
    }
    const Tensor step_loss = multiscale_loss(r.output.inverse_depths, batch.depths[t]);
    total = total.defined() ? total + step_loss : step_loss;
    state = std::move(r.state);
    previous_depth = r.output.depth;
    previous_poses = batch.views[t].poses;
  }
  return mul_scalar(total, 1.0 / static_cast<double>(length));
}

// ---------------------------------------------------------------------------
// Schedule

namespace {

using Snapshot = std::vector<std::vector<double>>;

Snapshot snapshot(VideoDepthModel& model) {
  Snapshot s;
  for (auto& p : model.parameters()) {
    const auto v = p.tensor->values();
    s.emplace_back(v.begin(), v.end());
  }
  return s;
}

void restore(VideoDepthModel& model, const Snapshot& s) {
  auto params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::copy(s[k].begin(), s[k].end(), params[k].tensor->mutable_values().begin());
  }
}

bool parameters_finite(VideoDepthModel& model) {
  for (auto& p : model.parameters()) {
    for (double v : p.tensor->values()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

double validation_loss(const VideoDepthModel& model, const std::vector<TrainingBatch>& batches,
                       FusionMode mode, const TrainStage& stage) {
  NoGradGuard no_grad;
  TrainStage eval_stage = stage;
  eval_stage.warp_source = WarpSource::kPrediction;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& batch : batches) {
    if (stage.id == StageId::kPair) {
      std::vector<EncodedView> encoded;
      for (const View& view : batch.views) encoded.push_back(encode_view(model, view));
      for (std::size_t t = 1; t < batch.views.size(); ++t) {
        total += pair_loss(model, encoded, batch, t, t - 1).item();
        ++count;
      }
    } else {
      std::mt19937_64 unused(0);
      total += batch_loss(model, batch, mode, eval_stage, false, unused).item();
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace

std::vector<StageReport> run_training(VideoDepthModel& model,
                                      const std::vector<TrainStage>& stages,
                                      const TrainingConfig& config,
                                      const std::vector<Sequence>& train,
                                      const std::vector<Sequence>& validation,
                                      const StageCallback& on_stage_end) {
  std::mt19937_64 rng(config.seed * 0x9e3779b97f4a7c15ULL + 17);
  std::vector<TrainingBatch> validation_batches;
  {
    std::mt19937_64 validation_rng(config.seed * 0x9e3779b97f4a7c15ULL + 29);
    const auto& source = validation.empty() ? train : validation;
    TrainingConfig batch_config = config;
    std::size_t remaining = config.validation_subsequences;
    const bool any_training = std::any_of(stages.begin(), stages.end(),
                                          [](const TrainStage& s) { return s.iterations > 0; });
    while (any_training && remaining > 0) {
      batch_config.batch_size = std::min(remaining, config.batch_size);
      validation_batches.push_back(sample_batch(source, batch_config, validation_rng, false));
      remaining -= batch_config.batch_size;
    }
  }

  std::vector<StageReport> reports;
  for (const TrainStage& stage : stages) {
    StageReport report;
    report.id = stage.id;
    model.set_trainable_groups(stage.trainable);
    if (stage.iterations > 0) {
      Adam adam(model.parameters(), stage.learning_rate);
      double best = validation_loss(model, validation_batches, config.fusion, stage);
      report.validation.emplace_back(0, best);
      Snapshot best_parameters = snapshot(model);
      for (int it = 1; it <= stage.iterations; ++it) {
        const TrainingBatch batch = sample_batch(train, config, rng, config.augmentation);
        adam.zero_grad();
        {
          const Tensor loss =
              batch_loss(model, batch, config.fusion, stage, config.symmetric_pair, rng);
          const double value = loss.item();
          if (!std::isfinite(value)) {
            throw TrainingDiverged(stage.id, it,
                                   std::string("non-finite loss in stage ") +
                                       to_string(stage.id) + " at iteration " +
                                       std::to_string(it));
          }
          loss.backward();
          report.losses.push_back(value);
        }
        adam.step();
        adam.zero_grad();
        if (!parameters_finite(model)) {
          throw TrainingDiverged(stage.id, it,
                                 std::string("non-finite parameters in stage ") +
                                     to_string(stage.id) + " at iteration " +
                                     std::to_string(it));
        }
        if (it % config.validation_interval == 0 || it == stage.iterations) {
          const double v = validation_loss(model, validation_batches, config.fusion, stage);
          report.validation.emplace_back(it, v);
          if (v < best) {
            best = v;
            best_parameters = snapshot(model);
            report.selected_iteration = it;
          }
        }
      }
      restore(model, best_parameters);
    }
    if (on_stage_end) on_stage_end(stage, report, model);
    reports.push_back(std::move(report));
  }
  model.set_trainable_groups({"extractor", "fpn", "encoder", "decoder", "cell"});
  return reports;
}

std::optional<MetricsReport> evaluate_online(const std::vector<Sequence>& sequences,
                                             const VideoDepthModel& model,
                                             const InferenceOptions& options) {
  MetricsAccumulator total;
  for (const Sequence& sequence : sequences) {
    const auto records = online_infer(sequence, model, options);
    for (const FrameRecord& record : records) {
      if (record.skipped) continue;
      const auto m = compute_metrics(record.depth, sequence.frames[record.frame_index].depth);
      if (m) total.add(*m);
    }
  }
  return total.result();
}

}  // namespace dvmvs
