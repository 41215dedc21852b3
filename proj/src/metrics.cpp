#include "dvmvs/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "dvmvs/tensor.hpp"
#include "json.hpp"

namespace dvmvs {

std::optional<MetricsReport> compute_metrics(const DepthMap& prediction,
                                             const DepthMap& groundtruth, double min_depth) {
  if (prediction.width != groundtruth.width || prediction.height != groundtruth.height) {
    if (prediction.width <= 0 || groundtruth.width % prediction.width != 0 ||
        groundtruth.height % prediction.height != 0 ||
        groundtruth.width / prediction.width != groundtruth.height / prediction.height) {
      throw ContractViolation("compute_metrics: prediction and groundtruth sizes are incompatible");
    }
    return compute_metrics(upsample_nearest(prediction, groundtruth.width / prediction.width),
                           groundtruth, min_depth);
  }
  MetricsReport report;
  for (std::size_t i = 0; i < groundtruth.size(); ++i) {
    const double d = groundtruth.values[i];
    if (!groundtruth.valid[i] || !(d >= min_depth)) continue;
    const double p = prediction.values[i];
    const double error = std::abs(d - p);
    report.abs += error;
    report.abs_rel += error / d;
    report.abs_inv += std::abs(1.0 / d - 1.0 / p);
    if (p > d / kInlierRatio && p < d * kInlierRatio) report.inlier += 1.0;
    ++report.count;
  }
  if (report.count == 0) return std::nullopt;
  const double n = static_cast<double>(report.count);
  report.abs /= n;
  report.abs_rel /= n;
  report.abs_inv /= n;
  report.inlier /= n;
  return report;
}

void MetricsAccumulator::add(const MetricsReport& report) {
  const double n = static_cast<double>(report.count);
  abs_ += report.abs * n;
  abs_rel_ += report.abs_rel * n;
  abs_inv_ += report.abs_inv * n;
  inlier_ += report.inlier * n;
  count_ += report.count;
}

std::optional<MetricsReport> MetricsAccumulator::result() const {
  if (count_ == 0) return std::nullopt;
  const double n = static_cast<double>(count_);
  return MetricsReport{abs_ / n, abs_rel_ / n, abs_inv_ / n, inlier_ / n, count_};
}

std::string hash_text(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buffer[17];
  std::snprintf(buffer, sizeof(buffer), "%016llx", static_cast<unsigned long long>(h));
  return buffer;
}

void save_report(const std::filesystem::path& path, const std::optional<MetricsReport>& report,
                 const RunMetadata& metadata) {
  nlohmann::ordered_json doc;
  if (report) {
    doc["metrics"] = {{"abs", report->abs},
                      {"abs_rel", report->abs_rel},
                      {"abs_inv", report->abs_inv},
                      {"inlier_1_25", report->inlier},
                      {"valid_pixels", report->count}};
  } else {
    doc["metrics"] = nullptr;
    doc["empty"] = true;
  }
  doc["seed"] = metadata.seed;
  doc["config_hash"] = metadata.config_hash;
  for (const auto& [key, value] : metadata.extra) doc[key] = value;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing report " + path.string());
}

}  // namespace dvmvs
