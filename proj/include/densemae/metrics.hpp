#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "densemae/dataset.hpp"
#include "densemae/volume.hpp"
#include "json.hpp"

namespace densemae {

// Lumen HU 350 normalizes to 0.336 and wall HU 60 to 0.265 under the default
// window; the cut sits halfway between them.
inline constexpr float kDefaultLumenThreshold = 0.30f;

struct Psnr {
  double db = 0.0;
  bool identical = false;  // MSE == 0; db is +inf
};

Psnr psnr(const Volume& pred, const Volume& target, double peak = 1.0);

// Mean SSIM over voxel centres with uniform cubic windows of edge `window_edge`,
// clipped to the volume at the borders; population (co)variances.
double ssim(const Volume& pred, const Volume& target, int window_edge = 7, double peak = 1.0);

VoxelMask segment_lumen(const Volume& vol, float threshold = kDefaultLumenThreshold);

// 2|a & b| / (|a| + |b|); 1 when both are empty.
double dice(const VoxelMask& a, const VoxelMask& b);

// Foreground voxels with at least one 6-neighbour that is background or outside the grid.
std::vector<Index3> surface_voxels(const VoxelMask& mask);

// Linear interpolation between order statistics at rank q/100 * (n - 1).
double percentile(std::vector<double> values, double q);

// max of the two directed 95th-percentile surface distances, in mm.
double hd95(const VoxelMask& a, const VoxelMask& b, const Spacing& spacing);

struct SampleMetrics {
  std::string id;
  Psnr psnr;
  double ssim = 0.0;
  double dsc = 0.0;
  std::optional<double> hd95;  // empty when either lumen segmentation is empty
};

struct MetricSummary {
  double mean = 0.0;
  double stddev = 0.0;  // population
  double median = 0.0;
  std::size_t count = 0;
};

struct MetricsReport {
  std::string method;
  std::vector<SampleMetrics> samples;
  MetricSummary psnr, ssim, dsc, hd95;
  std::size_t identical_psnr = 0;  // samples excluded from the PSNR summary
  std::size_t missing_hd95 = 0;
  nlohmann::json config;
};

struct EvalConfig {
  WindowSpec window;
  float calcium_threshold_hu = 500.0f;
  float lumen_threshold = kDefaultLumenThreshold;
  int ssim_window = 7;
  double peak = 1.0;
  int token_edge = 4;
  Split split = Split::kTest;
  // Feed the clean patch to the repair method instead of the corrupted one.
  bool feed_clean = false;

  nlohmann::json to_json() const;
};

// Missing keys keep the values of `defaults`.
EvalConfig eval_config_from_json(const nlohmann::json& j, const EvalConfig& defaults = {});

// HU patch in, normalized repaired patch out.
using RepairFn = std::function<Volume(const Volume& input_hu)>;

SampleMetrics compare(const std::string& id, const Volume& repaired, const Volume& clean_normalized,
                      const EvalConfig& cfg);
MetricSummary summarize(std::vector<double> values);
// Recomputes the aggregate fields from `samples`.
void summarize(MetricsReport& report);

MetricsReport evaluate_pairs(const Manifest& manifest, const RepairFn& repair, const EvalConfig& cfg,
                             const std::string& method);

nlohmann::json to_json(const SampleMetrics& m);
nlohmann::json summary_json(const MetricsReport& r);
// Per-sample records, one JSON object per line.
void write_samples_jsonl(const MetricsReport& r, std::ostream& out);
// method,psnr_mean,psnr_std,ssim_mean,ssim_std,dsc_mean,dsc_std,hd95_mean,hd95_std,n
void write_table_csv(const std::vector<MetricsReport>& reports, std::ostream& out);

}  // namespace densemae
