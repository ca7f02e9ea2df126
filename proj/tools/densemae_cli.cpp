// densemae: phantom generation, training, evaluation and experiment grids.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "densemae/dataset.hpp"
#include "densemae/errors.hpp"
#include "densemae/experiments.hpp"
#include "densemae/metrics.hpp"
#include "densemae/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace densemae;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int jobs = 1;
};

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open config '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw parse_error("config '" + path + "' is not valid JSON: " + e.what());
  }
}

nlohmann::json config_or_empty(const Globals& g) {
  return g.config.empty() ? nlohmann::json::object() : read_json(g.config);
}

// --out, else $DENSEMAE_OUT/<command>, else ./densemae_out/<command>.
fs::path output_dir(const Globals& g, const std::string& command) {
  if (!g.out.empty()) return g.out;
  if (const char* root = std::getenv("DENSEMAE_OUT"); root && *root) return fs::path(root) / command;
  return fs::path("densemae_out") / command;
}

void ensure_dir(const fs::path& dir) {
  if (!fs::exists(dir)) {
    fs::create_directories(dir);
    std::cerr << "created " << dir.string() << '\n';
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

struct PhantomArgs {
  int n_healthy = 64;
  int n_calcified = 16;
};

int cmd_phantom_gen(const Globals& g, const PhantomArgs& a) {
  const nlohmann::json j = config_or_empty(g);
  const DatasetSpec spec = dataset_spec_from_json(j.value("dataset", j));
  const fs::path dir = output_dir(g, "phantom");
  ensure_dir(dir);
  const Manifest m = build_dataset(a.n_healthy, a.n_calcified, dir, spec, g.seed.value_or(0), g.jobs);
  const fs::path manifest = dir / "manifest.jsonl";
  std::cout << "manifest " << manifest.string() << '\n'
            << "healthy " << a.n_healthy << " calcified " << a.n_calcified << " entries " << m.entries.size()
            << '\n'
            << "digest " << file_digest(manifest) << '\n';
  return 0;
}

struct TrainArgs {
  std::string manifest;
  std::string init;
  std::optional<double> label_fraction;
  bool scratch = false;
};

RunSpec load_run_spec(const Globals& g, const TrainArgs& a, RunMode mode, const std::string& command) {
  nlohmann::json j = config_or_empty(g);
  j["mode"] = mode_name(mode);
  if (!a.manifest.empty()) j["manifest"] = a.manifest;
  if (!a.init.empty()) j["init_checkpoint"] = a.init;
  if (a.label_fraction) j["label_fraction"] = *a.label_fraction;
  if (g.seed) j["seed"] = *g.seed;
  j["out_dir"] = output_dir(g, command).string();
  RunSpec spec = run_spec_from_json(j);
  if (spec.manifest.empty()) throw config_error(command + " needs a manifest (--manifest or config key)");
  return spec;
}

void print_outcome(const RunOutcome& o) {
  if (!o.epochs.empty()) {
    const auto& first = o.epochs.front();
    const auto& last = o.epochs.back();
    std::cout << "epochs " << o.epochs.size() << " steps " << last.step << '\n'
              << "val_mse first " << first.val_mse << " last " << last.val_mse << '\n';
  }
  std::cout << "checkpoint " << o.checkpoint.string() << '\n';
}

int cmd_pretrain(const Globals& g, const TrainArgs& a) {
  const RunSpec spec = load_run_spec(g, a, RunMode::kPretrain, "pretrain");
  print_outcome(pretrain(spec));
  return 0;
}

int cmd_finetune(const Globals& g, const TrainArgs& a) {
  if (a.scratch && !a.init.empty()) throw config_error("--scratch and --init are mutually exclusive");
  const RunMode mode = a.scratch ? RunMode::kScratch : RunMode::kFinetune;
  const RunSpec spec = load_run_spec(g, a, mode, a.scratch ? "scratch" : "finetune");
  if (!spec.init_checkpoint.empty() && !fs::exists(spec.init_checkpoint)) {
    throw io_error("init checkpoint '" + spec.init_checkpoint.string() + "' does not exist");
  }
  if (mode == RunMode::kFinetune && spec.init_checkpoint.empty()) {
    std::cerr << "no --init given: finetuning from random initialisation\n";
  }
  print_outcome(finetune(spec));
  return 0;
}

struct EvalArgs {
  std::string manifest;
  std::string method = "model";
  std::string checkpoint;
};

int cmd_evaluate(const Globals& g, const EvalArgs& a) {
  const nlohmann::json j = config_or_empty(g);
  const EvalConfig cfg = eval_config_from_json(j.value("eval", j));
  const std::string manifest_path = a.manifest.empty() ? j.value("manifest", std::string()) : a.manifest;
  if (manifest_path.empty()) throw config_error("evaluate needs a manifest (--manifest or config key)");
  const Manifest m = load_manifest(manifest_path);
  MetricsReport report;
  if (a.method == "model") {
    if (a.checkpoint.empty()) throw config_error("--method model needs --checkpoint");
    if (!fs::exists(a.checkpoint)) throw io_error("checkpoint '" + a.checkpoint + "' does not exist");
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    Model model = model_from_checkpoint(ckpt);
    report = evaluate_model(m, model, cfg, "model");
  } else if (a.method == "interp") {
    report = evaluate_interpolation(m, cfg);
  } else if (a.method == "corrupted") {
    report = evaluate_corrupted(m, cfg);
  } else {
    throw config_error("unknown method '" + a.method + "' (model, interp, corrupted)");
  }
  const fs::path dir = output_dir(g, "evaluate");
  ensure_dir(dir);
  nlohmann::json summary = summary_json(report);
  summary["manifest_digest"] = file_digest(manifest_path);
  if (!a.checkpoint.empty()) summary["checkpoint_digest"] = file_digest(a.checkpoint);
  write_json(dir / "evaluate_summary.json", summary);
  {
    std::ofstream out(dir / "evaluate_samples.jsonl", std::ios::binary);
    write_samples_jsonl(report, out);
  }
  {
    std::ofstream out(dir / "evaluate_table.csv", std::ios::binary);
    write_table_csv({report}, out);
  }
  write_table_csv({report}, std::cout);
  return 0;
}

struct ExperimentArgs {
  std::string manifest;
  std::vector<std::uint64_t> seeds;
  std::vector<double> ratios;
  std::vector<double> fractions;
  std::string pretrained;
  std::string scratch;
};

ExperimentConfig load_experiment(const Globals& g, const ExperimentArgs& a, const std::string& command) {
  nlohmann::json j = config_or_empty(g);
  if (!a.manifest.empty()) j["manifest"] = a.manifest;
  if (!a.seeds.empty()) j["seeds"] = a.seeds;
  if (g.seed) j["seeds"] = std::vector<std::uint64_t>{*g.seed};
  if (!a.ratios.empty()) j["ratios"] = a.ratios;
  if (!a.fractions.empty()) j["fractions"] = a.fractions;
  ExperimentConfig cfg = experiment_config_from_json(j);
  if (!g.out.empty() || cfg.out_dir.empty()) cfg.out_dir = output_dir(g, command);
  if (cfg.cache_dir.empty()) {
    const char* root = std::getenv("DENSEMAE_OUT");
    cfg.cache_dir = root && *root ? fs::path(root) / "cache" : cfg.out_dir / "cache";
  }
  return cfg;
}

int finish(const ExperimentReport& report, const ExperimentConfig& cfg) {
  write_report(report, cfg.out_dir);
  write_summary_csv(report, std::cout);
  std::cout << "report " << (cfg.out_dir / (report.name + "_report.json")).string() << '\n';
  return 0;
}

int cmd_compare(const Globals& g, const ExperimentArgs& a) {
  const ExperimentConfig cfg = load_experiment(g, a, "compare");
  return finish(run_compare(cfg, {a.pretrained, a.scratch}), cfg);
}

int cmd_ablate(const Globals& g, const ExperimentArgs& a) {
  const ExperimentConfig cfg = load_experiment(g, a, "ablate-mask-ratio");
  const ExperimentReport r = run_mask_ratio_ablation(cfg);
  for (const auto& run : r.runs)
    if (run.status != "ok") std::cerr << "ratio " << run.ratio << ": " << run.status << '\n';
  return finish(r, cfg);
}

int cmd_data_efficiency(const Globals& g, const ExperimentArgs& a) {
  const ExperimentConfig cfg = load_experiment(g, a, "data-efficiency");
  return finish(run_data_efficiency(cfg), cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vessel phantom masked-autoencoder pretraining, calcium inpainting and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option_function<std::uint64_t>("--seed", [&](std::uint64_t s) { g.seed = s; }, "Base seed");
  app.add_option("--out", g.out, "Output directory (default $DENSEMAE_OUT/<command>)");
  app.add_option("--jobs", g.jobs, "Worker threads for phantom generation")->check(CLI::PositiveNumber);

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom-gen", "Generate a synthetic healthy / calcified dataset");
  phantom->add_option("--n-healthy", pa.n_healthy, "Healthy patches")->check(CLI::NonNegativeNumber);
  phantom->add_option("--n-calcified", pa.n_calcified, "Calcified pairs")->check(CLI::NonNegativeNumber);

  TrainArgs ta;
  auto* pre = app.add_subcommand("pretrain", "Masked-reconstruction pretraining on healthy patches");
  pre->add_option("--manifest", ta.manifest, "Dataset manifest");
  auto* fine = app.add_subcommand("finetune", "Centre-mask finetuning on calcified pairs");
  fine->add_option("--manifest", ta.manifest, "Dataset manifest");
  fine->add_option("--init", ta.init, "Pretrained checkpoint");
  fine->add_option_function<double>("--label-fraction", [&](double f) { ta.label_fraction = f; },
                                    "Fraction of labelled pairs to use");
  fine->add_flag("--scratch", ta.scratch, "Random initialisation baseline");

  EvalArgs ea;
  auto* eval = app.add_subcommand("evaluate", "Score one repair method on the test pairs");
  eval->add_option("--manifest", ea.manifest, "Dataset manifest");
  eval->add_option("--method", ea.method, "model, interp or corrupted")
      ->check(CLI::IsMember({"model", "interp", "corrupted"}));
  eval->add_option("--checkpoint", ea.checkpoint, "Model checkpoint for --method model");

  ExperimentArgs xa;
  auto add_common = [&](CLI::App* c) {
    c->add_option("--manifest", xa.manifest, "Dataset manifest");
    c->add_option("--seeds", xa.seeds, "Seed list");
  };
  auto* cmp = app.add_subcommand("compare", "Interpolation vs scratch vs pretrained table");
  add_common(cmp);
  cmp->add_option("--pretrained", xa.pretrained, "Evaluate this finetuned checkpoint instead of training");
  cmp->add_option("--scratch", xa.scratch, "Evaluate this scratch checkpoint instead of training");
  auto* abl = app.add_subcommand("ablate-mask-ratio", "Pretraining mask-ratio sweep");
  add_common(abl);
  abl->add_option("--ratios", xa.ratios, "Mask ratios");
  auto* eff = app.add_subcommand("data-efficiency", "Label-fraction sweep, pretrained vs scratch");
  add_common(eff);
  eff->add_option("--fractions", xa.fractions, "Label fractions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*phantom) return cmd_phantom_gen(g, pa);
    if (*pre) return cmd_pretrain(g, ta);
    if (*fine) return cmd_finetune(g, ta);
    if (*eval) return cmd_evaluate(g, ea);
    if (*cmp) return cmd_compare(g, xa);
    if (*abl) return cmd_ablate(g, xa);
    if (*eff) return cmd_data_efficiency(g, xa);
  } catch (const Error& e) {
    std::cerr << "error [" << category_name(e.category()) << "]: " << e.what() << '\n';
    return exit_code(e.category());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error [io]: " << e.what() << '\n';
    return exit_code(ErrorCategory::kIo);
  }
  return 1;
}
