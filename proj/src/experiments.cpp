#include "densemae/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "densemae/baselines.hpp"
#include "densemae/errors.hpp"

namespace densemae {

void ExperimentConfig::validate() const {
  if (manifest.empty()) throw config_error("experiment needs a manifest path");
  if (seeds.empty()) throw config_error("experiment needs at least one seed");
  if (!(pretrain.model == finetune.model)) {
    throw config_error("pretrain and finetune model configs differ");
  }
  if (eval.token_edge != finetune.masking.token_edge) {
    throw config_error("eval token_edge " + std::to_string(eval.token_edge) + " differs from masking token_edge " +
                       std::to_string(finetune.masking.token_edge));
  }
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw config_error("label fractions must lie in (0, 1]");
  }
  pretrain.validate();
  finetune.validate();
}

namespace {

const char* kSharedKeys[] = {"model", "masking", "loss", "window", "calcium_threshold_hu", "augment",
                             "checkpoint_every"};

nlohmann::json shared_part(const nlohmann::json& j) {
  nlohmann::json base = nlohmann::json::object();
  for (const char* k : kSharedKeys)
    if (j.contains(k)) base[k] = j.at(k);
  return base;
}

}  // namespace

nlohmann::json to_json(const ExperimentConfig& c) {
  auto strip = [](nlohmann::json j) {
    j.erase("manifest");
    j.erase("out_dir");
    j.erase("init_checkpoint");
    j.erase("seed");
    return j;
  };
  return {{"manifest", c.manifest.string()},
          {"pretrain", strip(to_json(c.pretrain))},
          {"finetune", strip(to_json(c.finetune))},
          {"eval", c.eval.to_json()},
          {"seeds", c.seeds},
          {"ratios", c.ratios},
          {"fractions", c.fractions},
          {"reuse_checkpoints", c.reuse_checkpoints}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw config_error("experiment config must be a JSON object");
  ExperimentConfig c;
  try {
    c.manifest = j.value("manifest", std::string());
    const nlohmann::json base = shared_part(j);
    auto phase = [&](const char* key, RunMode mode) {
      nlohmann::json s = base;
      if (j.contains(key)) s.merge_patch(j.at(key));
      s["mode"] = mode_name(mode);
      s["manifest"] = c.manifest.string();
      return run_spec_from_json(s);
    };
    c.pretrain = phase("pretrain", RunMode::kPretrain);
    c.finetune = phase("finetune", RunMode::kFinetune);
    EvalConfig defaults;
    defaults.window = c.finetune.window;
    defaults.calcium_threshold_hu = c.finetune.calcium_threshold_hu;
    defaults.token_edge = c.finetune.masking.token_edge;
    c.eval = eval_config_from_json(j.value("eval", nlohmann::json::object()), defaults);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("ratios")) c.ratios = j.at("ratios").get<std::vector<double>>();
    if (j.contains("fractions")) c.fractions = j.at("fractions").get<std::vector<double>>();
    c.out_dir = j.value("out_dir", std::string());
    c.cache_dir = j.value("cache_dir", std::string());
    c.reuse_checkpoints = j.value("reuse_checkpoints", c.reuse_checkpoints);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("invalid experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

double median_psnr(const RunRecord& r) { return r.report.psnr.median; }

SeedAggregate aggregate(const std::vector<const RunRecord*>& runs, double (*metric)(const RunRecord&)) {
  SeedAggregate a;
  for (const RunRecord* r : runs) {
    a.seeds.push_back(r->seed);
    a.values.push_back(metric(*r));
  }
  if (a.values.empty()) {
    a.median = a.min = a.max = std::nan("");
    return a;
  }
  a.median = percentile(a.values, 50.0);
  a.min = *std::min_element(a.values.begin(), a.values.end());
  a.max = *std::max_element(a.values.begin(), a.values.end());
  return a;
}

std::vector<const RunRecord*> select_runs(const ExperimentReport& report, const std::string& method,
                                          std::optional<double> ratio, std::optional<double> fraction) {
  std::vector<const RunRecord*> out;
  for (const auto& r : report.runs) {
    if (r.method != method || r.status != "ok") continue;
    if (ratio && std::abs(r.ratio - *ratio) > 1e-12) continue;
    if (fraction && std::abs(r.fraction - *fraction) > 1e-12) continue;
    out.push_back(&r);
  }
  return out;
}

MetricsReport evaluate_model(const Manifest& manifest, Model& model, const EvalConfig& eval,
                             const std::string& method) {
  return evaluate_pairs(
      manifest,
      [&](const Volume& hu) {
        return inpaint(model, hu, eval.calcium_threshold_hu, eval.window, eval.token_edge).repaired;
      },
      eval, method);
}

MetricsReport evaluate_interpolation(const Manifest& manifest, const EvalConfig& eval) {
  return evaluate_pairs(
      manifest,
      [&](const Volume& hu) {
        const Volume normalized = window_normalize(hu, eval.window);
        const VoxelMask mask = inpaint_mask(hu, eval.calcium_threshold_hu, eval.token_edge);
        return mask.empty() ? normalized : interpolation_inpaint(normalized, mask);
      },
      eval, "interp");
}

MetricsReport evaluate_corrupted(const Manifest& manifest, const EvalConfig& eval) {
  return evaluate_pairs(
      manifest, [&](const Volume& hu) { return window_normalize(hu, eval.window); }, eval, "corrupted");
}

// ---------------------------------------------------------------------------

namespace {

std::string manifest_digest(const ExperimentConfig& cfg) { return file_digest(cfg.manifest); }

// Trains `spec` into dir/<key>/ unless a finished checkpoint is already there.
std::filesystem::path cached_run(const ExperimentConfig& cfg, RunSpec spec, const char* phase,
                                 const std::string& init_digest) {
  nlohmann::json identity = to_json(spec);
  identity.erase("out_dir");
  identity.erase("manifest");
  identity.erase("init_checkpoint");
  identity["manifest_digest"] = manifest_digest(cfg);
  identity["init_digest"] = init_digest;
  const std::string key = fnv1a_hex(identity.dump());
  const std::filesystem::path root = cfg.cache_dir.empty() ? cfg.out_dir : cfg.cache_dir;
  const std::filesystem::path dir = root / phase / key;
  const std::filesystem::path ckpt = dir / "checkpoint_final.dmck";
  if (cfg.reuse_checkpoints && std::filesystem::exists(ckpt)) return ckpt;
  spec.out_dir = dir;
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "run.json") << identity.dump(2) << '\n';
  }
  if (spec.mode == RunMode::kPretrain) {
    pretrain(spec);
  } else {
    finetune(spec);
  }
  return ckpt;
}

}  // namespace

std::filesystem::path pretrain_for(const ExperimentConfig& cfg, std::uint64_t seed, double ratio) {
  RunSpec spec = cfg.pretrain;
  spec.mode = RunMode::kPretrain;
  spec.manifest = cfg.manifest;
  spec.seed = seed;
  spec.masking.ratio = ratio;
  spec.init_checkpoint.clear();
  return cached_run(cfg, spec, "pretrain", "");
}

std::filesystem::path finetune_for(const ExperimentConfig& cfg, std::uint64_t seed, double fraction,
                                   const std::filesystem::path& init) {
  RunSpec spec = cfg.finetune;
  spec.mode = init.empty() ? RunMode::kScratch : RunMode::kFinetune;
  spec.manifest = cfg.manifest;
  spec.seed = seed;
  spec.label_fraction = fraction;
  spec.init_checkpoint = init;
  return cached_run(cfg, spec, "finetune", init.empty() ? "" : file_digest(init));
}

namespace {

ExperimentReport new_report(const std::string& name, const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentReport r;
  r.name = name;
  r.config = to_json(cfg);
  r.manifest_digest = manifest_digest(cfg);
  return r;
}

RunRecord model_row(const Manifest& m, const ExperimentConfig& cfg, const std::filesystem::path& ckpt,
                    const std::string& method, std::uint64_t seed, double ratio, double fraction) {
  RunRecord row;
  row.method = method;
  row.seed = seed;
  row.ratio = ratio;
  row.fraction = fraction;
  Model model = model_from_checkpoint(load_checkpoint(ckpt));
  row.report = evaluate_model(m, model, cfg.eval, method);
  return row;
}

RunRecord baseline_row(MetricsReport report) {
  RunRecord row;
  row.method = report.method;
  row.ratio = 0.0;
  row.fraction = 0.0;
  row.report = std::move(report);
  return row;
}

std::filesystem::path require_checkpoint(const std::filesystem::path& p, const char* role) {
  if (!std::filesystem::exists(p)) {
    throw io_error(std::string(role) + " checkpoint '" + p.string() +
                   "' does not exist; train it with the pretrain/finetune commands or omit it to train here");
  }
  return p;
}

}  // namespace

ExperimentReport run_compare(const ExperimentConfig& cfg, const CompareCheckpoints& given) {
  ExperimentReport report = new_report("compare", cfg);
  const Manifest m = load_manifest(cfg.manifest);
  const double ratio = cfg.pretrain.masking.ratio;
  const double fraction = cfg.finetune.label_fraction;
  report.runs.push_back(baseline_row(evaluate_interpolation(m, cfg.eval)));
  report.runs.push_back(baseline_row(evaluate_corrupted(m, cfg.eval)));
  if (!given.pretrained.empty() || !given.scratch.empty()) {
    if (!given.scratch.empty()) {
      report.runs.push_back(model_row(m, cfg, require_checkpoint(given.scratch, "scratch"), "scratch",
                                      cfg.seeds.front(), 0.0, fraction));
    }
    if (!given.pretrained.empty()) {
      report.runs.push_back(model_row(m, cfg, require_checkpoint(given.pretrained, "pretrained"), "pretrained",
                                      cfg.seeds.front(), ratio, fraction));
    }
    return report;
  }
  for (std::uint64_t seed : cfg.seeds) {
    const auto scratch = finetune_for(cfg, seed, fraction, {});
    report.runs.push_back(model_row(m, cfg, scratch, "scratch", seed, 0.0, fraction));
    const auto init = pretrain_for(cfg, seed, ratio);
    const auto tuned = finetune_for(cfg, seed, fraction, init);
    report.runs.push_back(model_row(m, cfg, tuned, "pretrained", seed, ratio, fraction));
  }
  return report;
}

ExperimentReport run_mask_ratio_ablation(const ExperimentConfig& cfg) {
  ExperimentReport report = new_report("ablate_mask_ratio", cfg);
  const Manifest m = load_manifest(cfg.manifest);
  const double fraction = cfg.finetune.label_fraction;
  for (double ratio : cfg.ratios) {
    if (!(ratio >= 0.0 && ratio < 1.0)) {
      RunRecord row;
      row.method = "pretrained";
      row.ratio = ratio;
      row.fraction = fraction;
      std::ostringstream os;
      os << "rejected: mask ratio " << ratio
         << (ratio >= 1.0 ? " leaves no visible context to reconstruct from" : " is negative");
      row.status = os.str();
      report.runs.push_back(std::move(row));
      continue;
    }
    for (std::uint64_t seed : cfg.seeds) {
      const auto init = pretrain_for(cfg, seed, ratio);
      const auto tuned = finetune_for(cfg, seed, fraction, init);
      report.runs.push_back(model_row(m, cfg, tuned, "pretrained", seed, ratio, fraction));
    }
  }
  return report;
}

ExperimentReport run_data_efficiency(const ExperimentConfig& cfg) {
  ExperimentReport report = new_report("data_efficiency", cfg);
  const Manifest m = load_manifest(cfg.manifest);
  const double ratio = cfg.pretrain.masking.ratio;
  for (double fraction : cfg.fractions) {
    for (std::uint64_t seed : cfg.seeds) {
      const auto init = pretrain_for(cfg, seed, ratio);
      report.runs.push_back(
          model_row(m, cfg, finetune_for(cfg, seed, fraction, init), "pretrained", seed, ratio, fraction));
      report.runs.push_back(
          model_row(m, cfg, finetune_for(cfg, seed, fraction, {}), "scratch", seed, 0.0, fraction));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

namespace {

std::string num(double v, int digits) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

double mean_ssim(const RunRecord& r) { return r.report.ssim.mean; }
double mean_dsc(const RunRecord& r) { return r.report.dsc.mean; }
double mean_hd95(const RunRecord& r) { return r.report.hd95.mean; }

struct Group {
  std::string method;
  double ratio;
  double fraction;
  std::vector<const RunRecord*> runs;
};

// Groups of ok rows keyed by (method, ratio, fraction) in first-appearance order.
std::vector<Group> groups(const ExperimentReport& report) {
  std::vector<Group> out;
  for (const auto& r : report.runs) {
    if (r.status != "ok") continue;
    auto it = std::find_if(out.begin(), out.end(), [&](const Group& g) {
      return g.method == r.method && g.ratio == r.ratio && g.fraction == r.fraction;
    });
    if (it == out.end()) {
      out.push_back({r.method, r.ratio, r.fraction, {}});
      it = out.end() - 1;
    }
    it->runs.push_back(&r);
  }
  return out;
}

}  // namespace

nlohmann::json report_json(const ExperimentReport& report) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : report.runs) {
    nlohmann::json row = {{"method", r.method}, {"seed", r.seed}, {"ratio", r.ratio},
                          {"fraction", r.fraction}, {"status", r.status}};
    if (r.status == "ok") row["metrics"] = summary_json(r.report);
    runs.push_back(std::move(row));
  }
  nlohmann::json aggregates = nlohmann::json::array();
  for (const Group& g : groups(report)) {
    const SeedAggregate p = aggregate(g.runs, median_psnr);
    nlohmann::json values = nlohmann::json::array();
    for (double v : p.values) values.push_back(finite_or_null(v));
    aggregates.push_back({{"method", g.method},
                          {"ratio", g.ratio},
                          {"fraction", g.fraction},
                          {"seeds", p.seeds},
                          {"psnr_median_per_seed", values},
                          {"psnr_median", finite_or_null(p.median)},
                          {"psnr_min", finite_or_null(p.min)},
                          {"psnr_max", finite_or_null(p.max)},
                          {"ssim_mean_median", finite_or_null(aggregate(g.runs, mean_ssim).median)},
                          {"dsc_mean_median", finite_or_null(aggregate(g.runs, mean_dsc).median)},
                          {"hd95_mean_median", finite_or_null(aggregate(g.runs, mean_hd95).median)}});
  }
  return {{"experiment", report.name},
          {"manifest_digest", report.manifest_digest},
          {"config", report.config},
          {"runs", runs},
          {"aggregates", aggregates}};
}

void write_summary_csv(const ExperimentReport& report, std::ostream& out) {
  out << "method,ratio,fraction,seeds,psnr_median_db,psnr_min_db,psnr_max_db,ssim,dsc,hd95_mm\n";
  for (const Group& g : groups(report)) {
    const SeedAggregate p = aggregate(g.runs, median_psnr);
    out << g.method << ',' << num(g.ratio, 2) << ',' << num(g.fraction, 2) << ',' << g.runs.size() << ','
        << num(p.median, 3) << ',' << num(p.min, 3) << ',' << num(p.max, 3) << ','
        << num(aggregate(g.runs, mean_ssim).median, 4) << ',' << num(aggregate(g.runs, mean_dsc).median, 4)
        << ',' << num(aggregate(g.runs, mean_hd95).median, 3) << '\n';
  }
  for (const auto& r : report.runs) {
    if (r.status != "ok") out << r.method << ',' << num(r.ratio, 2) << ',' << num(r.fraction, 2) << ",0,"
                              << r.status << ",,,,,\n";
  }
}

void write_report(const ExperimentReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const std::string& suffix) {
    const auto path = dir / (report.name + suffix);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path.string() + " for writing");
    return f;
  };
  {
    auto f = open("_report.json");
    f << report_json(report).dump(2) << '\n';
  }
  {
    auto f = open("_summary.csv");
    write_summary_csv(report, f);
  }
  {
    auto f = open("_runs.csv");
    f << "method,seed,ratio,fraction,status,psnr_median_db,psnr_mean_db,ssim_mean,dsc_mean,hd95_mean_mm,n\n";
    for (const auto& r : report.runs) {
      const auto& m = r.report;
      f << r.method << ',' << r.seed << ',' << num(r.ratio, 2) << ',' << num(r.fraction, 2) << ','
        << (r.status == "ok" ? "ok" : "rejected") << ',' << num(m.psnr.median, 3) << ','
        << num(m.psnr.mean, 3) << ',' << num(m.ssim.mean, 4) << ',' << num(m.dsc.mean, 4) << ','
        << num(m.hd95.mean, 3) << ',' << m.samples.size() << '\n';
    }
  }
  {
    auto f = open("_samples.jsonl");
    for (const auto& r : report.runs) {
      for (const auto& s : r.report.samples) {
        nlohmann::json j = to_json(s);
        j["method"] = r.method;
        j["seed"] = r.seed;
        j["ratio"] = r.ratio;
        j["fraction"] = r.fraction;
        f << j.dump() << '\n';
      }
    }
  }
}

}  // namespace densemae
