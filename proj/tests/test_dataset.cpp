#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "densemae/dataset.hpp"
#include "densemae/errors.hpp"
#include "densemae/phantom.hpp"

using namespace densemae;
namespace fs = std::filesystem;

namespace {

DatasetSpec small_spec() {
  DatasetSpec d;
  d.phantom.dims = Dims{40, 24, 24};
  d.patch_edge = 16;
  return d;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

std::size_t file_count(const fs::path& dir) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.is_regular_file();
  return n;
}

}  // namespace

TEST(AssignSplit, PositionalShares) {
  DatasetSpec s;
  int counts[3] = {0, 0, 0};
  for (std::size_t i = 0; i < 100; ++i) ++counts[static_cast<int>(assign_split(i, 100, s))];
  EXPECT_EQ(counts[static_cast<int>(Split::kTrain)], 70);
  EXPECT_EQ(counts[static_cast<int>(Split::kVal)], 10);
  EXPECT_EQ(counts[static_cast<int>(Split::kTest)], 20);
  EXPECT_EQ(assign_split(0, 100, s), Split::kTrain);
  EXPECT_EQ(assign_split(99, 100, s), Split::kTest);
}

TEST(BuildDataset, EntryAndFileCounts) {
  const fs::path dir = fresh_dir("densemae_test_dataset_counts");
  const Manifest m = build_dataset(10, 5, dir, small_spec(), 1);
  EXPECT_EQ(m.entries.size(), 15u);
  EXPECT_EQ(file_count(dir), 10u + 2u * 5u + 1u);  // volumes plus manifest.jsonl
  const Manifest back = load_manifest(dir / "manifest.jsonl");
  ASSERT_EQ(back.entries.size(), 15u);
  for (std::size_t i = 0; i < back.entries.size(); ++i) {
    EXPECT_EQ(to_json(back.entries[i]), to_json(m.entries[i]));
  }
  fs::remove_all(dir);
}

TEST(BuildDataset, ReproducibleAndIndependentOfJobs) {
  const fs::path a = fresh_dir("densemae_test_dataset_a"), b = fresh_dir("densemae_test_dataset_b"),
                 c = fresh_dir("densemae_test_dataset_c");
  build_dataset(6, 6, a, small_spec(), 7, 1);
  build_dataset(6, 6, b, small_spec(), 7, 3);
  build_dataset(6, 6, c, small_spec(), 8, 1);
  EXPECT_EQ(file_digest(a / "manifest.jsonl"), file_digest(b / "manifest.jsonl"));
  EXPECT_NE(file_digest(a / "manifest.jsonl"), file_digest(c / "manifest.jsonl"));
  for (const auto& e : fs::directory_iterator(a / "volumes")) {
    EXPECT_EQ(file_digest(e.path()), file_digest(b / "volumes" / e.path().filename()));
  }
  for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST(BuildDataset, CalcifiedPatchesCarryCalcium) {
  const fs::path dir = fresh_dir("densemae_test_dataset_calcium");
  const DatasetSpec spec = small_spec();
  const Manifest m = build_dataset(4, 12, dir, spec, 3);
  for (const auto& e : m.entries) {
    if (e.role == SampleRole::kHealthy) {
      const Volume v = load_volume(m.resolve(e.volume));
      EXPECT_EQ(v.dims(), (Dims{16, 16, 16}));
      EXPECT_TRUE(threshold_mask(v, spec.calcium.threshold_hu).empty()) << e.id;
      continue;
    }
    const Volume clean = load_volume(m.resolve(e.clean));
    const Volume bad = load_volume(m.resolve(e.corrupted));
    EXPECT_TRUE(threshold_mask(clean, spec.calcium.threshold_hu).empty()) << e.id;
    EXPECT_GE(threshold_mask(bad, spec.calcium.threshold_hu).count(), 1u) << e.id;
    EXPECT_EQ(clean.spacing(), bad.spacing());
  }
  fs::remove_all(dir);
}

TEST(Manifest, ParseErrors) {
  const fs::path dir = fresh_dir("densemae_test_manifest_errors");
  fs::create_directories(dir);
  EXPECT_THROW(load_manifest(dir / "missing.jsonl"), Error);
  {
    std::ofstream(dir / "bad.jsonl") << "{\"id\": \"x\"\n";
  }
  EXPECT_THROW(load_manifest(dir / "bad.jsonl"), Error);
  fs::remove_all(dir);
}

TEST(Digest, Fnv1a) {
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}
