#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "densemae/centerline.hpp"
#include "densemae/phantom.hpp"
#include "densemae/volume.hpp"
#include "json.hpp"

namespace densemae {

enum class SampleRole { kHealthy, kCalcified };
enum class Split { kTrain, kVal, kTest };

const char* role_name(SampleRole r);
const char* split_name(Split s);
Split parse_split(const std::string& s);

struct DatasetSpec {
  PhantomSpec phantom;
  CalciumSpec calcium;  // placement_mm is drawn per sample
  int patch_edge = 32;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  // Arc-length fraction range for the patch centre (healthy) or plaque (calcified).
  double placement_min = 0.3;
  double placement_max = 0.7;

  void validate() const;
};

// One manifest line. Healthy entries own one HU patch file; calcified entries
// own a clean and a corrupted file. The centerline is expressed in the patch
// frame (mm, patch voxel (0, 0, 0) at the origin).
struct ManifestEntry {
  std::string id;
  SampleRole role = SampleRole::kHealthy;
  Split split = Split::kTrain;
  std::uint64_t seed = 0;
  std::string volume;     // healthy
  std::string clean;      // calcified
  std::string corrupted;  // calcified
  Index3 origin;          // patch origin in the generating volume
  Centerline centerline;
  nlohmann::json calcium;  // spec echo with the drawn placement (calcified only)
};

struct Manifest {
  std::filesystem::path root;  // directory holding manifest.jsonl
  std::vector<ManifestEntry> entries;

  std::vector<const ManifestEntry*> select(SampleRole role, Split split) const;
  std::filesystem::path resolve(const std::string& relative) const { return root / relative; }
};

nlohmann::json to_json(const ManifestEntry& e);
ManifestEntry manifest_entry_from_json(const nlohmann::json& j);

nlohmann::json to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const nlohmann::json& j);

// Splits by position within each role: the first (1 - val - test) share is
// train, then val, then test.
Split assign_split(std::size_t position, std::size_t count, const DatasetSpec& spec);

// Generates one healthy patch (HU) and its patch-frame centerline.
struct HealthySample {
  Patch patch;
  Centerline centerline;
};
HealthySample make_healthy_sample(const DatasetSpec& spec, std::uint64_t seed);

struct CalcifiedSample {
  Patch clean;
  Patch corrupted;
  Centerline centerline;
  CalciumSpec calcium;
};
CalcifiedSample make_calcified_sample(const DatasetSpec& spec, std::uint64_t seed);

// Writes volumes/ and manifest.jsonl under out_dir. Sample i of each role uses
// derive_seed(seed, {role, i}), so any `jobs` value yields identical files.
Manifest build_dataset(int n_healthy, int n_calcified, const std::filesystem::path& out_dir,
                       const DatasetSpec& spec, std::uint64_t seed, int jobs = 1);

Manifest load_manifest(const std::filesystem::path& manifest_path);

// FNV-1a 64 of the file bytes, as 16 lowercase hex digits.
std::string file_digest(const std::filesystem::path& path);
std::string fnv1a_hex(std::string_view bytes);

}  // namespace densemae
