#include "densemae/dataset.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "densemae/errors.hpp"
#include "densemae/rng.hpp"

namespace densemae {

const char* role_name(SampleRole r) { return r == SampleRole::kHealthy ? "healthy" : "calcified"; }

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw parse_error("unknown split '" + s + "'");
}

void DatasetSpec::validate() const {
  phantom.validate();
  calcium.validate();
  if (patch_edge < 1) throw config_error("patch edge must be >= 1");
  if (!(val_fraction >= 0 && test_fraction >= 0 && val_fraction + test_fraction <= 1)) {
    throw config_error("split fractions must be >= 0 and sum to at most 1");
  }
  if (!(placement_min >= 0 && placement_min <= placement_max && placement_max <= 1)) {
    throw config_error("placement range must satisfy 0 <= min <= max <= 1");
  }
}

std::vector<const ManifestEntry*> Manifest::select(SampleRole role, Split split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries)
    if (e.role == role && e.split == split) out.push_back(&e);
  return out;
}

Split assign_split(std::size_t position, std::size_t count, const DatasetSpec& spec) {
  const auto n_test = static_cast<std::size_t>(std::floor(spec.test_fraction * count));
  const auto n_val = static_cast<std::size_t>(std::floor(spec.val_fraction * count));
  const std::size_t n_train = count - n_test - n_val;
  if (position < n_train) return Split::kTrain;
  if (position < n_train + n_val) return Split::kVal;
  return Split::kTest;
}

namespace {

constexpr std::uint64_t kHealthyStream = 1;
constexpr std::uint64_t kCalcifiedStream = 2;

// Random permutation of the phantom axes so vessels run along z, y or x.
PhantomSpec oriented(const PhantomSpec& in, Rng& rng) {
  PhantomSpec s = in;
  if (!in.random_axis) return s;
  static constexpr std::array<std::array<int, 3>, 6> kPerms{
      {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
  const auto& p = kPerms[rng.below(6)];
  const int d[3] = {in.dims.d, in.dims.h, in.dims.w};
  const float sp[3] = {in.spacing.z, in.spacing.y, in.spacing.x};
  s.dims = {d[p[0]], d[p[1]], d[p[2]]};
  s.spacing = {sp[p[0]], sp[p[1]], sp[p[2]]};
  return s;
}

Index3 nearest_voxel(const Vec3& p, const Spacing& sp, const Dims& dims) {
  return {std::clamp(static_cast<int>(std::lround(p.z / sp.z)), 0, dims.d - 1),
          std::clamp(static_cast<int>(std::lround(p.y / sp.y)), 0, dims.h - 1),
          std::clamp(static_cast<int>(std::lround(p.x / sp.x)), 0, dims.w - 1)};
}

Centerline to_patch_frame(const Centerline& cl, const Index3& origin, const Spacing& sp) {
  Centerline out = cl;
  const Vec3 shift = voxel_position(origin.z, origin.y, origin.x, sp);
  for (auto& p : out.points) p = p - shift;
  return out;
}

}  // namespace

HealthySample make_healthy_sample(const DatasetSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  const PhantomSpec ps = oriented(spec.phantom, rng);
  const Centerline cl = generate_centerline(ps, rng);
  const Volume vol = rasterize_vessel(cl, ps, rng);
  const double s = rng.uniform(spec.placement_min, spec.placement_max) * cl.length();
  HealthySample out;
  out.patch = extract_patch(vol, nearest_voxel(cl.point_at(s), ps.spacing, ps.dims), spec.patch_edge);
  out.centerline = to_patch_frame(cl, out.patch.origin, ps.spacing);
  return out;
}

CalcifiedSample make_calcified_sample(const DatasetSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  const PhantomSpec ps = oriented(spec.phantom, rng);
  const Centerline cl = generate_centerline(ps, rng);
  const Volume vol = rasterize_vessel(cl, ps, rng);
  CalcifiedSample out;
  out.calcium = spec.calcium;
  out.calcium.placement_mm = rng.uniform(spec.placement_min, spec.placement_max) * cl.length();
  const CalcifiedVolume cv = inject_calcification(vol, cl, out.calcium, rng);
  const Index3 center = nearest_voxel(cv.plaque_center, ps.spacing, ps.dims);
  out.clean = extract_patch(cv.clean, center, spec.patch_edge);
  out.corrupted = extract_patch(cv.corrupted, center, spec.patch_edge);
  out.centerline = to_patch_frame(cl, out.clean.origin, ps.spacing);
  return out;
}

nlohmann::json to_json(const ManifestEntry& e) {
  nlohmann::json files;
  if (e.role == SampleRole::kHealthy) {
    files = {{"volume", e.volume}};
  } else {
    files = {{"clean", e.clean}, {"corrupted", e.corrupted}};
  }
  nlohmann::json j = {{"id", e.id},
                      {"role", role_name(e.role)},
                      {"split", split_name(e.split)},
                      {"seed", e.seed},
                      {"files", files},
                      {"origin", {e.origin.z, e.origin.y, e.origin.x}},
                      {"centerline", to_json(e.centerline)}};
  if (e.role == SampleRole::kCalcified) j["calcium"] = e.calcium;
  return j;
}

ManifestEntry manifest_entry_from_json(const nlohmann::json& j) {
  ManifestEntry e;
  try {
    e.id = j.at("id").get<std::string>();
    const std::string role = j.at("role").get<std::string>();
    if (role == "healthy") {
      e.role = SampleRole::kHealthy;
    } else if (role == "calcified") {
      e.role = SampleRole::kCalcified;
    } else {
      throw parse_error("unknown role '" + role + "' in manifest entry " + e.id);
    }
    e.split = parse_split(j.at("split").get<std::string>());
    e.seed = j.at("seed").get<std::uint64_t>();
    const auto& files = j.at("files");
    if (e.role == SampleRole::kHealthy) {
      e.volume = files.at("volume").get<std::string>();
    } else {
      e.clean = files.at("clean").get<std::string>();
      e.corrupted = files.at("corrupted").get<std::string>();
      e.calcium = j.at("calcium");
    }
    const auto o = j.at("origin").get<std::vector<int>>();
    if (o.size() != 3) throw parse_error("manifest origin must have 3 entries");
    e.origin = {o[0], o[1], o[2]};
    e.centerline = centerline_from_json(j.at("centerline"));
  } catch (const nlohmann::json::exception& ex) {
    throw parse_error(std::string("malformed manifest entry: ") + ex.what());
  }
  return e;
}

nlohmann::json to_json(const DatasetSpec& s) {
  return {{"phantom", to_json(s.phantom)},
          {"calcium", to_json(s.calcium)},
          {"patch_edge", s.patch_edge},
          {"val_fraction", s.val_fraction},
          {"test_fraction", s.test_fraction},
          {"placement_range", {s.placement_min, s.placement_max}}};
}

DatasetSpec dataset_spec_from_json(const nlohmann::json& j) {
  DatasetSpec s;
  try {
    if (j.contains("phantom")) s.phantom = phantom_spec_from_json(j.at("phantom"));
    if (j.contains("calcium")) s.calcium = calcium_spec_from_json(j.at("calcium"));
    s.patch_edge = j.value("patch_edge", s.patch_edge);
    s.val_fraction = j.value("val_fraction", s.val_fraction);
    s.test_fraction = j.value("test_fraction", s.test_fraction);
    if (j.contains("placement_range")) {
      const auto r = j.at("placement_range").get<std::vector<double>>();
      if (r.size() != 2) throw config_error("placement_range must have 2 entries");
      s.placement_min = r[0];
      s.placement_max = r[1];
    }
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("invalid dataset spec: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

std::string numbered(const char* prefix, int i) {
  std::ostringstream os;
  os << prefix << '_' << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

// Runs body(i) for i in [0, n) on up to `jobs` threads; rethrows the first error.
template <class F>
void parallel_for(int n, int jobs, F body) {
  if (jobs <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (int t = 0; t < std::min(jobs, n); ++t) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

Manifest build_dataset(int n_healthy, int n_calcified, const std::filesystem::path& out_dir,
                       const DatasetSpec& spec, std::uint64_t seed, int jobs) {
  if (n_healthy < 0 || n_calcified < 0) throw invalid_argument("sample counts must be >= 0");
  spec.validate();
  const std::filesystem::path vol_dir = out_dir / "volumes";
  std::error_code ec;
  std::filesystem::create_directories(vol_dir, ec);
  if (ec) throw io_error("cannot create " + vol_dir.string() + ": " + ec.message());

  Manifest manifest;
  manifest.root = out_dir;
  manifest.entries.resize(static_cast<std::size_t>(n_healthy) + n_calcified);

  parallel_for(n_healthy, jobs, [&](int i) {
    ManifestEntry& e = manifest.entries[i];
    e.id = numbered("healthy", i);
    e.role = SampleRole::kHealthy;
    e.split = assign_split(i, n_healthy, spec);
    e.seed = derive_seed(seed, {kHealthyStream, static_cast<std::uint64_t>(i)});
    const HealthySample s = make_healthy_sample(spec, e.seed);
    e.volume = "volumes/" + e.id + ".vxma";
    e.origin = s.patch.origin;
    e.centerline = s.centerline;
    save_volume(s.patch.values, out_dir / e.volume);
  });
  parallel_for(n_calcified, jobs, [&](int i) {
    ManifestEntry& e = manifest.entries[n_healthy + i];
    e.id = numbered("calcified", i);
    e.role = SampleRole::kCalcified;
    e.split = assign_split(i, n_calcified, spec);
    e.seed = derive_seed(seed, {kCalcifiedStream, static_cast<std::uint64_t>(i)});
    const CalcifiedSample s = make_calcified_sample(spec, e.seed);
    e.clean = "volumes/" + e.id + "_clean.vxma";
    e.corrupted = "volumes/" + e.id + "_corrupted.vxma";
    e.origin = s.clean.origin;
    e.centerline = s.centerline;
    e.calcium = to_json(s.calcium);
    save_volume(s.clean.values, out_dir / e.clean);
    save_volume(s.corrupted.values, out_dir / e.corrupted);
  });

  const std::filesystem::path path = out_dir / "manifest.jsonl";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  for (const auto& e : manifest.entries) out << to_json(e).dump() << '\n';
  if (!out) throw io_error("failed writing " + path.string());
  return manifest;
}

Manifest load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw io_error("cannot open manifest " + manifest_path.string());
  Manifest m;
  m.root = manifest_path.parent_path();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      m.entries.push_back(manifest_entry_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw parse_error(manifest_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.category(), manifest_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return m;
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return fnv1a_hex(buf.str());
}

}  // namespace densemae
