#pragma once

#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvmvs/metrics.hpp"
#include "dvmvs/pipeline.hpp"

namespace dvmvs {

// ---------------------------------------------------------------------------
// Subsequence sampling

struct SamplingThresholds {
  double pose_distance = 0.35;
  double translation = 0.10;
};

struct SamplingConfig {
  std::size_t length = 8;
  double pose_distance = 0.35;
  double pose_distance_spread = 0.05;
  double translation = 0.10;
  double translation_spread = 0.05;
  int retries = 20;
};

/// Uniform draws within mean +/- spread, made once per subsequence.
SamplingThresholds draw_thresholds(const SamplingConfig& config, std::mt19937_64& rng);

/// Greedy walk from start: the next frame is the farthest one such that it
/// and every frame before it stay within both thresholds of the current
/// frame. nullopt when the walk stalls or runs out of frames.
std::optional<std::vector<std::size_t>> subsequence_from(const std::vector<Pose>& poses,
                                                         std::size_t start, std::size_t length,
                                                         const SamplingThresholds& thresholds);

/// Random start and thresholds with retries; nullopt signals a skip.
std::optional<std::vector<std::size_t>> sample_subsequence(const Sequence& sequence,
                                                           const SamplingConfig& config,
                                                           std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Geometric scale augmentation

struct AugmentConfig {
  double min_scale = 0.666;
  double max_scale = 1.5;
  DepthRange range;
};

struct ScaleBounds {
  double low = 1.0;
  double high = 1.0;
  bool empty() const { return !(low <= high); }
};

/// [max(min_scale, near / min_gt), min(max_scale, far / max_gt)] over the
/// valid positive groundtruth of all frames.
ScaleBounds effective_scale_bounds(const std::vector<Frame>& frames, const AugmentConfig& config);

/// Multiplies groundtruth depths and pose translations by s.
void apply_scale(std::vector<Frame>& frames, double s);

/// Draws one factor for the whole subsequence and applies it; returns it.
/// Empty bounds leave the frames untouched and return 1.
double scale_augment(std::vector<Frame>& frames, const AugmentConfig& config,
                     std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Optimizer

/// First-order adaptive moments:
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// Only parameters that require gradients are touched.
class Adam {
 public:
  Adam(ParameterList parameters, double learning_rate, double beta1 = 0.9,
       double beta2 = 0.999, double epsilon = 1e-8);

  void step();
  void zero_grad();
  long steps() const { return t_; }

 private:
  ParameterList parameters_;
  double lr_;
  double beta1_;
  double beta2_;
  double epsilon_;
  long t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

// ---------------------------------------------------------------------------
// Staged schedule

enum class StageId { kPair, kCellDecoder, kEncoderFpn, kFull, kCellFinetune };

const char* to_string(StageId id);

struct TrainStage {
  StageId id = StageId::kPair;
  std::vector<std::string> trainable;  // parameter groups
  double learning_rate = 1e-4;
  int iterations = 0;
  WarpSource warp_source = WarpSource::kGroundtruth;
};

struct StageBudgets {
  int pair = 500;
  int cell_decoder = 500;
  int encoder_fpn = 500;
  int full = 1000;
  int cell_finetune = 300;
};

/// Pair stage only for FusionMode::kPair; otherwise the four fusion stages
/// (which follow a pair stage when include_pair is set).
std::vector<TrainStage> make_stages(FusionMode mode, const StageBudgets& budgets,
                                    double learning_rate, double finetune_learning_rate,
                                    bool include_pair = true);

struct TrainingConfig {
  std::uint64_t seed = 1;
  FusionMode fusion = FusionMode::kWarped;
  std::size_t measurements = 1;
  int image_size = 64;
  ModelConfig model;
  std::size_t batch_size = 4;
  SamplingConfig sampling;
  AugmentConfig augment;
  bool augmentation = true;
  bool symmetric_pair = false;
  double learning_rate = 1e-4;
  double finetune_learning_rate = 5e-5;
  StageBudgets budgets;
  int validation_interval = 50;
  std::size_t validation_subsequences = 4;
  std::string train_data;
  std::string validation_data;
  std::string output;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parses the key = value training config (optional [iterations] section).
TrainingConfig parse_training_config(const std::string& text);
TrainingConfig load_training_config(const std::filesystem::path& path);
/// Canonical text of every setting; its hash identifies a run.
std::string canonical_config(const TrainingConfig& config);

struct StageReport {
  StageId id = StageId::kPair;
  std::vector<double> losses;
  std::vector<std::pair<int, double>> validation;  // (iteration, loss)
  int selected_iteration = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(StageId stage, int iteration, const std::string& what)
      : std::runtime_error(what), stage(stage), iteration(iteration) {}
  StageId stage;
  int iteration;
};

/// Batch of equally long subsequences stacked per time step.
struct TrainingBatch {
  std::vector<View> views;                     // one per time step
  std::vector<std::vector<DepthMap>> depths;   // [time][batch]
};

/// Samples batch_size subsequences from random sequences (with scale
/// augmentation when enabled). All sequences must share intrinsics.
TrainingBatch sample_batch(const std::vector<Sequence>& sequences, const TrainingConfig& config,
                           std::mt19937_64& rng, bool augment);

/// Mean loss of one batch under the stage's computation. Pair stages
/// predict each frame from its predecessor (and the reverse when
/// symmetric); fusion stages run the cell through the whole subsequence.
Tensor batch_loss(const VideoDepthModel& model, const TrainingBatch& batch, FusionMode mode,
                  const TrainStage& stage, bool symmetric_pair, std::mt19937_64& rng);

using StageCallback = std::function<void(const TrainStage&, const StageReport&,
                                         const VideoDepthModel&)>;

/// Runs the stages in order on model (modified in place). After each stage
/// the parameters with the best validation loss seen during it (its start
/// included) are restored. Throws TrainingDiverged on a non-finite loss.
std::vector<StageReport> run_training(VideoDepthModel& model,
                                      const std::vector<TrainStage>& stages,
                                      const TrainingConfig& config,
                                      const std::vector<Sequence>& train,
                                      const std::vector<Sequence>& validation,
                                      const StageCallback& on_stage_end = {});

/// Pixel-weighted metrics of online inference over every predicted frame.
std::optional<MetricsReport> evaluate_online(const std::vector<Sequence>& sequences,
                                             const VideoDepthModel& model,
                                             const InferenceOptions& options);

}  // namespace dvmvs
