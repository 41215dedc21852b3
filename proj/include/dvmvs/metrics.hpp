#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "dvmvs/depth_map.hpp"

namespace dvmvs {

inline constexpr double kMetricMinDepth = 0.5;
inline constexpr double kInlierRatio = 1.25;

struct MetricsReport {
  double abs = 0.0;
  double abs_rel = 0.0;
  double abs_inv = 0.0;
  double inlier = 0.0;
  std::size_t count = 0;
};

/// Errors over pixels whose groundtruth is valid and at least min_depth.
/// A prediction of a different size is first enlarged with nearest
/// neighbour sampling (its size must divide the groundtruth size).
/// Returns nullopt when no pixel qualifies.
std::optional<MetricsReport> compute_metrics(const DepthMap& prediction,
                                             const DepthMap& groundtruth,
                                             double min_depth = kMetricMinDepth);

/// Running pixel-weighted mean over many maps.
class MetricsAccumulator {
 public:
  void add(const MetricsReport& report);
  std::optional<MetricsReport> result() const;

 private:
  double abs_ = 0.0;
  double abs_rel_ = 0.0;
  double abs_inv_ = 0.0;
  double inlier_ = 0.0;
  std::size_t count_ = 0;
};

struct RunMetadata {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::map<std::string, std::string> extra;
};

/// Writes {"metrics": {...}, "seed": ..., "config_hash": ..., ...} as JSON.
void save_report(const std::filesystem::path& path, const std::optional<MetricsReport>& report,
                 const RunMetadata& metadata);

/// FNV-1a 64-bit digest rendered as 16 hex digits.
std::string hash_text(const std::string& text);

}  // namespace dvmvs
