#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "densemae/metrics.hpp"
#include "densemae/training.hpp"
#include "json.hpp"

namespace densemae {

// Everything an experiment grid needs; each run derives its RunSpec from
// `pretrain` / `finetune` by overriding seed, ratio, fraction, init and out_dir.
struct ExperimentConfig {
  std::filesystem::path manifest;
  RunSpec pretrain;
  RunSpec finetune;
  EvalConfig eval;
  std::vector<std::uint64_t> seeds{0};
  std::vector<double> ratios{0.2, 0.4, 0.6, 0.75, 0.8};
  std::vector<double> fractions{0.1, 0.25, 0.5, 1.0};
  std::filesystem::path out_dir;
  // Checkpoints live under cache_dir/{pretrain,finetune}/<digest of the resolved
  // RunSpec and its inputs> (cache_dir defaults to out_dir) and are reused when
  // the same run is requested again, also across experiments.
  std::filesystem::path cache_dir;
  bool reuse_checkpoints = true;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
// Top-level RunSpec keys (model, masking, loss, window, calcium_threshold_hu,
// augment, checkpoint_every) are shared; "pretrain" and "finetune" hold RunSpec
// objects merged over them. Also: manifest, eval, seeds, ratios, fractions,
// out_dir, cache_dir, reuse_checkpoints.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

struct RunRecord {
  std::string method;  // "pretrained", "scratch", "interp", "corrupted"
  std::uint64_t seed = 0;
  double ratio = 0.0;     // pretraining mask ratio (pretrained rows)
  double fraction = 1.0;  // label fraction
  std::string status = "ok";  // "ok" or "rejected: <reason>"
  MetricsReport report;
};

struct ExperimentReport {
  std::string name;
  nlohmann::json config;
  std::string manifest_digest;
  std::vector<RunRecord> runs;
};

// Spread of one scalar across seeds.
struct SeedAggregate {
  std::vector<std::uint64_t> seeds;
  std::vector<double> values;  // per seed, in seed order
  double median = 0.0;
  double min = 0.0;
  double max = 0.0;
};

SeedAggregate aggregate(const std::vector<const RunRecord*>& runs, double (*metric)(const RunRecord&));
double median_psnr(const RunRecord& r);

std::vector<const RunRecord*> select_runs(const ExperimentReport& report, const std::string& method,
                                          std::optional<double> ratio = std::nullopt,
                                          std::optional<double> fraction = std::nullopt);

// Single-method evaluations on the manifest's evaluation split.
MetricsReport evaluate_model(const Manifest& manifest, Model& model, const EvalConfig& eval,
                             const std::string& method);
MetricsReport evaluate_interpolation(const Manifest& manifest, const EvalConfig& eval);
MetricsReport evaluate_corrupted(const Manifest& manifest, const EvalConfig& eval);

// Pretrain for one seed and ratio, honouring reuse_checkpoints; returns the final checkpoint path.
std::filesystem::path pretrain_for(const ExperimentConfig& cfg, std::uint64_t seed, double ratio);
// Finetune (init given) or scratch (init empty) for one seed and label fraction.
std::filesystem::path finetune_for(const ExperimentConfig& cfg, std::uint64_t seed, double fraction,
                                   const std::filesystem::path& init);

// Interpolation, scratch and pretrained rows per seed plus one corrupted row.
// With explicit checkpoints, evaluates them once instead of training.
struct CompareCheckpoints {
  std::filesystem::path pretrained;
  std::filesystem::path scratch;
};
ExperimentReport run_compare(const ExperimentConfig& cfg, const CompareCheckpoints& given = {});
// One pretrained row per (ratio, seed); ratios >= 1 are recorded as rejected.
ExperimentReport run_mask_ratio_ablation(const ExperimentConfig& cfg);
// Pretrained and scratch rows per (fraction, seed).
ExperimentReport run_data_efficiency(const ExperimentConfig& cfg);

// <name>_runs.csv, <name>_summary.csv, <name>_samples.jsonl and <name>_report.json under dir.
void write_report(const ExperimentReport& report, const std::filesystem::path& dir);
nlohmann::json report_json(const ExperimentReport& report);
// One row per (method, ratio, fraction) group: medians and spread over seeds.
void write_summary_csv(const ExperimentReport& report, std::ostream& out);

}  // namespace densemae
