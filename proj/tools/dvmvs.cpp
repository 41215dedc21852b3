// Command-line front end: synth, train, infer, eval, select-frames.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dvmvs/synthetic.hpp"
#include "dvmvs/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace dvmvs;
using Json = nlohmann::ordered_json;

namespace {

constexpr int kExitDiverged = 3;

struct ModelFlags {
  std::optional<int> planes;
  std::optional<double> near;
  std::optional<double> far;
};

void add_model_flags(CLI::App* app, ModelFlags& flags) {
  app->add_option("--planes", flags.planes, "number of depth planes M")
      ->check(CLI::Range(2, 1024));
  app->add_option("--near", flags.near, "nearest plane depth in meters")
      ->check(CLI::PositiveNumber);
  app->add_option("--far", flags.far, "farthest plane depth in meters")
      ->check(CLI::PositiveNumber);
}

void apply_model_flags(const ModelFlags& flags, ModelConfig& model) {
  if (flags.planes) model.plane_count = *flags.planes;
  if (flags.near) model.range.near = *flags.near;
  if (flags.far) model.range.far = *flags.far;
  if (!(model.range.far > model.range.near)) {
    throw ConfigError("--far must exceed --near");
  }
}

fs::path model_sidecar(const fs::path& checkpoint) {
  fs::path p = checkpoint;
  p += ".json";
  return p;
}

void write_model_sidecar(const fs::path& checkpoint, const ModelConfig& model) {
  Json doc;
  doc["planes"] = model.plane_count;
  doc["near"] = model.range.near;
  doc["far"] = model.range.far;
  doc["cell_kind"] = model.cell.kind == CellKind::kConvLstm ? "convlstm" : "convgru";
  doc["cell_configuration"] = model.cell.configuration;
  doc["seed"] = model.seed;
  std::ofstream out(model_sidecar(checkpoint));
  out << std::setprecision(17) << doc.dump(2) << '\n';
}

ModelConfig read_model_sidecar(const fs::path& checkpoint) {
  ModelConfig model;
  std::ifstream in(model_sidecar(checkpoint));
  if (!in) return model;
  const Json doc = Json::parse(in);
  model.plane_count = doc.at("planes").get<int>();
  model.range.near = doc.at("near").get<double>();
  model.range.far = doc.at("far").get<double>();
  model.cell.kind =
      doc.at("cell_kind").get<std::string>() == "convgru" ? CellKind::kConvGru : CellKind::kConvLstm;
  model.cell.configuration = doc.at("cell_configuration").get<int>();
  model.seed = doc.at("seed").get<std::uint64_t>();
  return model;
}

std::string file_text(const fs::path& path) {
  std::ifstream in(path);
  std::ostringstream text;
  text << in.rdbuf();
  return text.str();
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  fs::path output;
  std::uint64_t seed = 0;
  int scenes = 1;
  int frames = 40;
  double step = 0.12;
  int image_size = 64;
  int first_index = 0;
};

int run_synth(const SynthArgs& args) {
  SceneConfig config;
  config.width = args.image_size;
  config.height = args.image_size;
  for (int s = 0; s < args.scenes; ++s) {
    const std::uint64_t scene_seed = args.seed * 1000003ULL + static_cast<std::uint64_t>(s);
    const SyntheticScene scene = generate_scene(scene_seed, args.frames, args.step, config);
    std::ostringstream name;
    name << "scene_" << std::setw(3) << std::setfill('0') << (args.first_index + s);
    save_sequence(args.output / name.str(), render_sequence(scene, name.str()));
  }
  std::cout << "wrote " << args.scenes << " scene(s) to " << args.output << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  fs::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> fusion;
  std::optional<std::size_t> measurements;
  std::optional<int> image_size;
  std::optional<fs::path> output;
  ModelFlags model;
};

int run_train(const TrainArgs& args) {
  TrainingConfig config = load_training_config(args.config);
  if (args.seed) config.seed = *args.seed;
  if (args.fusion) config.fusion = parse_fusion_mode(*args.fusion);
  if (args.measurements) config.measurements = *args.measurements;
  if (args.image_size) config.image_size = *args.image_size;
  if (args.output) config.output = args.output->string();
  apply_model_flags(args.model, config.model);
  config.model.seed = config.seed;
  config.augment.range = config.model.range;
  if (config.train_data.empty() || config.output.empty()) {
    throw ConfigError("config must name train_data and output");
  }
  // Relative dataset paths are resolved against the config file.
  const fs::path base = args.config.parent_path();
  const auto resolve = [&](const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : base / path;
  };
  const std::vector<Sequence> train = load_dataset(resolve(config.train_data));
  const std::vector<Sequence> validation = config.validation_data.empty()
                                               ? std::vector<Sequence>{}
                                               : load_dataset(resolve(config.validation_data));
  for (const auto* set : {&train, &validation}) {
    for (const Sequence& s : *set) {
      if (s.intrinsics.width != config.image_size || s.intrinsics.height != config.image_size) {
        throw ConfigError("sequence " + s.name + " is not " + std::to_string(config.image_size) +
                          "x" + std::to_string(config.image_size));
      }
    }
  }
  const fs::path output = args.output ? *args.output : resolve(config.output);
  fs::create_directories(output);
  const std::string config_hash = hash_text(canonical_config(config));

  VideoDepthModel model(config.model);
  const auto stages = make_stages(config.fusion, config.budgets, config.learning_rate,
                                  config.finetune_learning_rate);
  std::ofstream loss_log(output / "losses.csv");
  loss_log << std::setprecision(17) << "stage,iteration,loss\n";
  Json stage_log = Json::array();
  const auto on_stage = [&](const TrainStage& stage, const StageReport& report,
                            const VideoDepthModel& trained) {
    const fs::path checkpoint = output / (std::string("stage_") + to_string(stage.id) + ".ckpt");
    save_model(checkpoint, trained);
    write_model_sidecar(checkpoint, trained.config());
    for (std::size_t i = 0; i < report.losses.size(); ++i) {
      loss_log << to_string(stage.id) << ',' << (i + 1) << ',' << report.losses[i] << '\n';
    }
    Json entry;
    entry["stage"] = to_string(stage.id);
    entry["iterations"] = stage.iterations;
    entry["learning_rate"] = stage.learning_rate;
    entry["selected_iteration"] = report.selected_iteration;
    Json validation_log = Json::array();
    for (const auto& [it, v] : report.validation) validation_log.push_back({it, v});
    entry["validation"] = validation_log;
    stage_log.push_back(entry);
    std::cout << "stage " << to_string(stage.id) << ": " << report.losses.size()
              << " iterations, selected " << report.selected_iteration << "\n";
  };
  Json doc;
  doc["seed"] = config.seed;
  doc["config_hash"] = config_hash;
  doc["fusion"] = to_string(config.fusion);
  try {
    run_training(model, stages, config, train, validation, on_stage);
  } catch (const TrainingDiverged& e) {
    doc["status"] = "diverged";
    doc["stage"] = to_string(e.stage);
    doc["iteration"] = e.iteration;
    doc["message"] = e.what();
    doc["stages"] = stage_log;
    std::ofstream(output / "train_report.json") << doc.dump(2) << '\n';
    std::cerr << "training aborted: " << e.what() << "\n";
    return kExitDiverged;
  }
  save_model(output / "model.ckpt", model);
  write_model_sidecar(output / "model.ckpt", model.config());
  doc["status"] = "ok";
  doc["stages"] = stage_log;
  std::ofstream(output / "train_report.json") << doc.dump(2) << '\n';
  std::cout << "wrote " << (output / "model.ckpt") << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  fs::path data;
  fs::path output;
  std::optional<fs::path> checkpoint;
  std::string fusion = "warped";
  std::size_t measurements = 1;
  std::uint64_t seed = 1;
  ModelFlags model;
};

VideoDepthModel build_model(const std::optional<fs::path>& checkpoint, const ModelFlags& flags,
                            std::uint64_t seed) {
  ModelConfig config;
  config.seed = seed;
  if (checkpoint) config = read_model_sidecar(*checkpoint);
  apply_model_flags(flags, config);
  VideoDepthModel model(config);
  if (checkpoint) load_model(*checkpoint, model);
  return model;
}

int run_infer(const InferArgs& args) {
  const VideoDepthModel model = build_model(args.checkpoint, args.model, args.seed);
  InferenceOptions options;
  options.mode = parse_fusion_mode(args.fusion);
  options.measurements = args.measurements;
  const auto sequences = load_dataset(args.data, false);
  for (const Sequence& sequence : sequences) {
    const fs::path directory = sequences.size() == 1 && fs::exists(args.data / "intrinsics.txt")
                                   ? args.output
                                   : args.output / sequence.name;
    fs::create_directories(directory);
    const auto records = online_infer(sequence, model, options);
    Json log = Json::array();
    std::size_t predicted = 0;
    for (const FrameRecord& record : records) {
      Json entry;
      entry["frame"] = record.frame_index;
      entry["skipped"] = record.skipped;
      entry["keyframe"] = record.keyframe_added;
      entry["measurements"] = record.measurement_frames;
      log.push_back(entry);
      if (record.skipped) continue;
      save_depth(directory / frame_file_name(record.frame_index), record.depth);
      ++predicted;
    }
    Json doc;
    doc["fusion"] = to_string(options.mode);
    doc["measurements"] = options.measurements;
    doc["frames"] = log;
    std::ofstream(directory / "records.json") << doc.dump(2) << '\n';
    std::cout << sequence.name << ": " << predicted << " of " << records.size()
              << " frames predicted\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  fs::path predictions;
  fs::path groundtruth;
  fs::path report;
  std::uint64_t seed = 0;
  std::optional<fs::path> config;
};

// A directory of depth PNGs: dir/depth when it is a dataset, else dir.
fs::path depth_folder(const fs::path& directory) {
  return fs::is_directory(directory / "depth") ? directory / "depth" : directory;
}

std::vector<std::pair<std::string, fs::path>> depth_sets(const fs::path& root) {
  std::vector<std::pair<std::string, fs::path>> sets;
  if (fs::exists(root / "intrinsics.txt") || fs::exists(root / "records.json")) {
    return {{"", depth_folder(root)}};
  }
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) sets.emplace_back(entry.path().filename().string(),
                                                depth_folder(entry.path()));
  }
  std::sort(sets.begin(), sets.end());
  if (sets.empty()) sets.emplace_back("", depth_folder(root));
  return sets;
}

int run_eval(const EvalArgs& args) {
  if (!fs::is_directory(args.predictions)) {
    throw DatasetError(args.predictions.string() + " is not a directory");
  }
  if (!fs::is_directory(args.groundtruth)) {
    throw DatasetError(args.groundtruth.string() + " is not a directory");
  }
  MetricsAccumulator total;
  std::size_t frames = 0;
  std::size_t missing = 0;
  for (const auto& [name, gt_folder] : depth_sets(args.groundtruth)) {
    const fs::path pred_root = name.empty() ? args.predictions : args.predictions / name;
    const fs::path pred_folder = depth_folder(pred_root);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(gt_folder)) {
      if (entry.path().extension() == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const fs::path& gt_file : files) {
      const fs::path pred_file = pred_folder / gt_file.filename();
      if (!fs::exists(pred_file)) {
        ++missing;
        continue;
      }
      const auto m = compute_metrics(load_depth(pred_file), load_depth(gt_file));
      ++frames;
      if (m) total.add(*m);
    }
  }
  RunMetadata metadata;
  metadata.seed = args.seed;
  metadata.config_hash = args.config ? hash_text(file_text(*args.config)) : hash_text("");
  metadata.extra["evaluated_frames"] = std::to_string(frames);
  metadata.extra["missing_predictions"] = std::to_string(missing);
  const auto result = total.result();
  if (!args.report.parent_path().empty()) fs::create_directories(args.report.parent_path());
  save_report(args.report, result, metadata);
  if (result) {
    std::cout << std::setprecision(6) << "abs " << result->abs << "  abs-rel " << result->abs_rel
              << "  abs-inv " << result->abs_inv << "  inlier " << result->inlier << "  ("
              << result->count << " px, " << frames << " frames)\n";
  } else {
    std::cout << "no valid pixels\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct SelectArgs {
  fs::path data;
  std::size_t measurements = 2;
  std::optional<fs::path> output;
};

int run_select(const SelectArgs& args) {
  const auto sequences = load_dataset(args.data, false);
  Json doc = Json::array();
  for (const Sequence& sequence : sequences) {
    KeyframeBuffer buffer;
    Json frames = Json::array();
    for (std::size_t i = 0; i < sequence.frames.size(); ++i) {
      const Pose& pose = sequence.frames[i].pose;
      Json entry;
      entry["frame"] = i;
      Json ranking = Json::array();
      for (const RankedKeyframe& r : rank_keyframes(buffer, pose)) {
        ranking.push_back({{"keyframe", r.keyframe->frame_index}, {"penalty", r.penalty}});
      }
      entry["ranking"] = ranking;
      Json selected = Json::array();
      for (const Keyframe* kf : select_measurements(buffer, pose, args.measurements)) {
        selected.push_back(kf->frame_index);
      }
      entry["selected"] = selected;
      entry["distance_to_last_keyframe"] =
          buffer.empty() ? Json(nullptr)
                         : Json(pose_distance(relative_pose(buffer.keyframes().back().pose, pose)));
      entry["admitted"] = buffer.update(i, pose);
      Json contents = Json::array();
      for (const Keyframe& kf : buffer.keyframes()) contents.push_back(kf.frame_index);
      entry["buffer"] = contents;
      frames.push_back(entry);
    }
    doc.push_back({{"sequence", sequence.name}, {"frames", frames}});
  }
  if (args.output) {
    std::ofstream(*args.output) << doc.dump(2) << '\n';
  } else {
    std::cout << doc.dump(2) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view depth estimation with recurrent fusion"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "render a synthetic posed RGB-D dataset");
  synth_cmd->add_option("--output,-o", synth.output, "dataset directory")->required();
  synth_cmd->add_option("--seed", synth.seed, "random seed");
  synth_cmd->add_option("--scenes", synth.scenes, "number of scenes")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--frames", synth.frames, "frames per scene")->check(CLI::Range(2, 100000));
  synth_cmd->add_option("--step", synth.step, "pose distance between frames")
      ->check(CLI::PositiveNumber);
  synth_cmd->add_option("--image-size", synth.image_size, "square image size")
      ->check(CLI::PositiveNumber);
  synth_cmd->add_option("--first-index", synth.first_index, "number of the first scene");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "run the staged training schedule");
  train_cmd->add_option("--config,-c", train.config, "training config file")
      ->required()
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--seed", train.seed, "override the config seed");
  train_cmd->add_option("--fusion", train.fusion, "pair, naive or warped")
      ->check(CLI::IsMember({"pair", "naive", "warped"}));
  train_cmd->add_option("--measurements", train.measurements, "measurement frames");
  train_cmd->add_option("--image-size", train.image_size, "expected square image size");
  train_cmd->add_option("--output,-o", train.output, "override the output directory");
  add_model_flags(train_cmd, train.model);

  InferArgs infer;
  auto* infer_cmd = app.add_subcommand("infer", "online depth prediction over a dataset");
  infer_cmd->add_option("--data,-d", infer.data, "dataset directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  infer_cmd->add_option("--output,-o", infer.output, "prediction directory")->required();
  infer_cmd->add_option("--checkpoint", infer.checkpoint, "trained model")
      ->check(CLI::ExistingFile);
  infer_cmd->add_option("--fusion", infer.fusion, "pair, naive or warped")
      ->check(CLI::IsMember({"pair", "naive", "warped"}));
  infer_cmd->add_option("--measurements,-k", infer.measurements, "measurement frames")
      ->check(CLI::PositiveNumber);
  infer_cmd->add_option("--seed", infer.seed, "initialization seed without a checkpoint");
  add_model_flags(infer_cmd, infer.model);

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "compare predicted and groundtruth depth");
  eval_cmd->add_option("--pred,-p", eval.predictions, "prediction directory")->required();
  eval_cmd->add_option("--gt,-g", eval.groundtruth, "groundtruth directory")->required();
  eval_cmd->add_option("--report,-r", eval.report, "report file")->required();
  eval_cmd->add_option("--seed", eval.seed, "seed recorded in the report");
  eval_cmd->add_option("--config", eval.config, "config whose hash is recorded")
      ->check(CLI::ExistingFile);

  SelectArgs select;
  auto* select_cmd =
      app.add_subcommand("select-frames", "dump keyframe decisions and rankings per frame");
  select_cmd->add_option("--data,-d", select.data, "dataset directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  select_cmd->add_option("--measurements,-k", select.measurements, "measurement frames")
      ->check(CLI::PositiveNumber);
  select_cmd->add_option("--output,-o", select.output, "JSON output file");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth_cmd) return run_synth(synth);
    if (*train_cmd) return run_train(train);
    if (*infer_cmd) return run_infer(infer);
    if (*eval_cmd) return run_eval(eval);
    if (*select_cmd) return run_select(select);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
