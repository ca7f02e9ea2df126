#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "densemae/dataset.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(DENSEMAE_CLI) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Small phantoms, 16^3 patches and a tiny network keep every command under a few seconds.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "densemae_test_cli";
    fs::remove_all(root_);
    fs::create_directories(root_);
    const nlohmann::json cfg = {
        {"dataset", {{"patch_edge", 16}, {"phantom", {{"dims", {40, 24, 24}}}}}},
        {"model", {{"patch_edge", 16}, {"stem_channels", 4}, {"growth", 2}, {"layers_per_block", 1}, {"levels", 2}}},
        {"masking", {{"token_edge", 4}, {"ratio", 0.6}}},
        {"optimizer", {{"epochs", 1}, {"warmup_epochs", 0}, {"batch_size", 8}, {"lr", 1e-3}}},
        {"pretrain", {{"optimizer", {{"epochs", 1}, {"warmup_epochs", 0}, {"batch_size", 8}}}}},
        {"finetune", {{"optimizer", {{"epochs", 1}, {"warmup_epochs", 0}, {"batch_size", 8}}}}},
        {"seeds", {1}}};
    std::ofstream(root_ / "config.json") << cfg.dump(2);
  }
  static fs::path root_;
  static std::string config() { return "--config " + (root_ / "config.json").string(); }
  static std::string manifest() { return (root_ / "data" / "manifest.jsonl").string(); }
  static void ensure_data() {
    if (!fs::exists(manifest())) {
      ASSERT_EQ(run(config() + " --seed 7 --out " + (root_ / "data").string() +
                    " phantom-gen --n-healthy 12 --n-calcified 10")
                    .code,
                0);
    }
  }
};
fs::path Cli::root_;

}  // namespace

TEST_F(Cli, PhantomGenCountsAndRepeatableDigest) {
  const fs::path a = root_ / "gen_a" / "nested", b = root_ / "gen_b";
  const Result ra = run(config() + " --seed 7 --out " + a.string() + " phantom-gen --n-healthy 6 --n-calcified 4");
  ASSERT_EQ(ra.code, 0);
  EXPECT_NE(ra.out.find("entries 10"), std::string::npos) << ra.out;
  EXPECT_TRUE(fs::exists(a / "manifest.jsonl"));
  const Result rb = run(config() + " --seed 7 --out " + b.string() + " --jobs 2 phantom-gen --n-healthy 6 --n-calcified 4");
  ASSERT_EQ(rb.code, 0);
  EXPECT_EQ(densemae::file_digest(a / "manifest.jsonl"), densemae::file_digest(b / "manifest.jsonl"));
}

TEST_F(Cli, ErrorsMapToExitCodes) {
  EXPECT_NE(run("").code, 0);
  EXPECT_NE(run("no-such-command").code, 0);
  EXPECT_NE(run("--config /nonexistent.json phantom-gen").code, 0);
  ensure_data();
  // Missing checkpoint: io category.
  EXPECT_EQ(run(config() + " --out " + (root_ / "e").string() + " evaluate --manifest " + manifest() +
                " --method model --checkpoint " + (root_ / "missing.dmck").string())
                .code,
            5);
  EXPECT_EQ(run(config() + " --out " + (root_ / "c").string() + " compare --manifest " + manifest() +
                " --pretrained " + (root_ / "missing.dmck").string())
                .code,
            5);
  // Scratch with an init checkpoint: config category.
  EXPECT_EQ(run(config() + " --out " + (root_ / "s").string() + " finetune --manifest " + manifest() +
                " --scratch --init x.dmck")
                .code,
            2);
}

TEST_F(Cli, PretrainFinetuneEvaluate) {
  ensure_data();
  const fs::path pre = root_ / "pre", fine = root_ / "fine", ev = root_ / "eval";
  ASSERT_EQ(run(config() + " --seed 3 --out " + pre.string() + " pretrain --manifest " + manifest()).code, 0);
  ASSERT_TRUE(fs::exists(pre / "checkpoint_final.dmck"));
  ASSERT_TRUE(fs::exists(pre / "train_log.jsonl"));
  ASSERT_EQ(run(config() + " --seed 3 --out " + fine.string() + " finetune --manifest " + manifest() + " --init " +
                (pre / "checkpoint_final.dmck").string() + " --label-fraction 0.5")
                .code,
            0);
  const Result r = run(config() + " --out " + ev.string() + " evaluate --manifest " + manifest() +
                       " --method model --checkpoint " + (fine / "checkpoint_final.dmck").string());
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("model,"), std::string::npos);
  const auto summary = nlohmann::json::parse(slurp(ev / "evaluate_summary.json"));
  EXPECT_EQ(summary.at("manifest_digest"), densemae::file_digest(manifest()));
  EXPECT_TRUE(summary.at("config").contains("lumen_threshold"));
  ASSERT_EQ(run(config() + " --out " + ev.string() + " evaluate --manifest " + manifest() + " --method interp").code,
            0);
  const auto interp = nlohmann::json::parse(slurp(ev / "evaluate_summary.json"));
  EXPECT_TRUE(interp.at("psnr_db").at("mean").is_number());
  EXPECT_TRUE(interp.at("ssim").at("mean").is_number());
  EXPECT_TRUE(interp.at("dsc").at("mean").is_number());
}

TEST_F(Cli, CompareIsReproducible) {
  ensure_data();
  const fs::path a = root_ / "cmp_a", b = root_ / "cmp_b";
  ASSERT_EQ(run(config() + " --out " + a.string() + " compare --manifest " + manifest()).code, 0);
  ASSERT_EQ(run(config() + " --out " + b.string() + " compare --manifest " + manifest()).code, 0);
  const std::string ta = slurp(a / "compare_summary.csv");
  EXPECT_EQ(ta, slurp(b / "compare_summary.csv"));
  EXPECT_EQ(slurp(a / "compare_samples.jsonl"), slurp(b / "compare_samples.jsonl"));
  EXPECT_EQ(slurp(a / "compare_runs.csv"), slurp(b / "compare_runs.csv"));
  for (const char* method : {"interp,", "scratch,", "pretrained,", "corrupted,"}) {
    EXPECT_NE(ta.find(method), std::string::npos) << method;
  }
  const auto report = nlohmann::json::parse(slurp(a / "compare_report.json"));
  EXPECT_EQ(report.at("manifest_digest"), densemae::file_digest(manifest()));
  EXPECT_TRUE(report.at("config").contains("pretrain"));
}

TEST_F(Cli, AblationRejectsFullMaskRatio) {
  ensure_data();
  const fs::path out = root_ / "abl";
  ASSERT_EQ(run(config() + " --out " + out.string() + " ablate-mask-ratio --manifest " + manifest() +
                " --ratios 0.2 0.6 1.0")
                .code,
            0);
  const auto report = nlohmann::json::parse(slurp(out / "ablate_mask_ratio_report.json"));
  const auto& runs = report.at("runs");
  ASSERT_EQ(runs.size(), 3u);
  EXPECT_EQ(runs[0].at("status"), "ok");
  EXPECT_EQ(runs[1].at("status"), "ok");
  EXPECT_NE(runs[2].at("status").get<std::string>().find("rejected"), std::string::npos);
  for (int i = 0; i < 2; ++i) {
    EXPECT_TRUE(runs[i].at("metrics").at("psnr_db").at("median").is_number());
    EXPECT_TRUE(runs[i].at("metrics").at("ssim").at("mean").is_number());
  }
  EXPECT_EQ(report.at("aggregates").size(), 2u);
}

TEST_F(Cli, DataEfficiencyGrid) {
  ensure_data();
  const fs::path out = root_ / "eff";
  ASSERT_EQ(run(config() + " --out " + out.string() + " data-efficiency --manifest " + manifest() +
                " --fractions 0.5 1.0 --seeds 1 2")
                .code,
            0);
  const auto report = nlohmann::json::parse(slurp(out / "data_efficiency_report.json"));
  EXPECT_EQ(report.at("runs").size(), 8u);
  const auto& agg = report.at("aggregates");
  ASSERT_EQ(agg.size(), 4u);
  bool scratch_full = false;
  for (const auto& g : agg) {
    EXPECT_EQ(g.at("seeds"), (nlohmann::json{1, 2}));
    EXPECT_EQ(g.at("psnr_median_per_seed").size(), 2u);
    scratch_full |= g.at("method") == "scratch" && g.at("fraction") == 1.0;
  }
  EXPECT_TRUE(scratch_full);
}

TEST_F(Cli, OutputRootFromEnvironment) {
  ensure_data();
  const fs::path env_root = root_ / "env_root";
  const std::string cmd = "DENSEMAE_OUT=" + env_root.string() + " " + std::string(DENSEMAE_CLI) + " " + config() +
                          " --seed 2 phantom-gen --n-healthy 2 --n-calcified 1 > /dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_TRUE(fs::exists(env_root / "phantom" / "manifest.jsonl"));
}
