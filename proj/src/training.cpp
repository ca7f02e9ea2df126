#include "densemae/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "densemae/errors.hpp"
#include "densemae/rng.hpp"

namespace densemae {

const char* mode_name(RunMode m) {
  switch (m) {
    case RunMode::kPretrain: return "pretrain";
    case RunMode::kFinetune: return "finetune";
    case RunMode::kScratch: return "scratch";
  }
  return "pretrain";
}

const char* strategy_name(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::kRandom: return "random";
    case MaskStrategy::kVesselAware: return "vessel_aware";
    case MaskStrategy::kCenter: return "center";
  }
  return "random";
}

namespace {

RunMode parse_mode(const std::string& s) {
  if (s == "pretrain") return RunMode::kPretrain;
  if (s == "finetune") return RunMode::kFinetune;
  if (s == "scratch") return RunMode::kScratch;
  throw config_error("unknown run mode '" + s + "' (expected pretrain, finetune or scratch)");
}

MaskStrategy parse_strategy(const std::string& s) {
  if (s == "random") return MaskStrategy::kRandom;
  if (s == "vessel_aware") return MaskStrategy::kVesselAware;
  if (s == "center") return MaskStrategy::kCenter;
  throw config_error("unknown masking strategy '" + s + "' (expected random, vessel_aware or center)");
}

// Independent random streams derived from the run seed.
constexpr std::uint64_t kModelStream = 11;
constexpr std::uint64_t kShuffleStream = 12;
constexpr std::uint64_t kSampleStream = 13;
constexpr std::uint64_t kValidationStream = 14;

}  // namespace

void RunSpec::validate() const {
  model.validate();
  optimizer.validate();
  if (model.patch_edge % masking.token_edge != 0) {
    throw config_error("token edge " + std::to_string(masking.token_edge) +
                       " does not divide patch edge " + std::to_string(model.patch_edge));
  }
  if (!(masking.ratio >= 0.0 && masking.ratio < 1.0)) {
    throw config_error("masking ratio " + std::to_string(masking.ratio) +
                       " must lie in [0, 1): a fully masked patch leaves no visible context");
  }
  if (mode == RunMode::kPretrain && masking.strategy != MaskStrategy::kCenter &&
      std::floor(masking.ratio * std::pow(model.patch_edge / masking.token_edge, 3)) < 1) {
    throw config_error("masking ratio masks no token; the reconstruction loss would be empty");
  }
  if (!(masking.vessel_beta >= 0.0 && masking.vessel_beta <= 1.0)) {
    throw config_error("vessel preference must lie in [0, 1]");
  }
  if (!(label_fraction > 0.0 && label_fraction <= 1.0)) {
    throw config_error("label fraction must lie in (0, 1]");
  }
  if (!(loss.edge_weight >= 0.0)) throw config_error("edge-loss weight must be >= 0");
  if (loss.edge_dilation < 0) throw config_error("edge-loss dilation must be >= 0");
  if (!(window.hu_min < window.hu_max)) throw config_error("window requires hu_min < hu_max");
  if (mode == RunMode::kScratch && !init_checkpoint.empty()) {
    throw config_error("scratch mode forbids an init checkpoint");
  }
  if (checkpoint_every < 0) throw config_error("checkpoint_every must be >= 0");
}

nlohmann::json to_json(const DenseUnetConfig& c) {
  return {{"patch_edge", c.patch_edge}, {"stem_channels", c.stem_channels},
          {"growth", c.growth},         {"layers_per_block", c.layers_per_block},
          {"levels", c.levels},         {"mask_channel", c.mask_channel}};
}

DenseUnetConfig model_config_from_json(const nlohmann::json& j) {
  DenseUnetConfig c;
  try {
    c.patch_edge = j.value("patch_edge", c.patch_edge);
    c.stem_channels = j.value("stem_channels", c.stem_channels);
    c.growth = j.value("growth", c.growth);
    c.layers_per_block = j.value("layers_per_block", c.layers_per_block);
    c.levels = j.value("levels", c.levels);
    c.mask_channel = j.value("mask_channel", c.mask_channel);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("invalid model config: ") + e.what());
  }
  try {
    c.validate();
  } catch (const Error& e) {
    throw config_error(e.what());
  }
  return c;
}

nlohmann::json to_json(const RunSpec& s) {
  return {{"mode", mode_name(s.mode)},
          {"manifest", s.manifest.string()},
          {"masking",
           {{"strategy", strategy_name(s.masking.strategy)},
            {"token_edge", s.masking.token_edge},
            {"ratio", s.masking.ratio},
            {"vessel_beta", s.masking.vessel_beta},
            {"center_cube", s.masking.center_cube},
            {"cube_from_calcium", s.masking.cube_from_calcium}}},
          {"model", to_json(s.model)},
          {"loss", {{"edge_weight", s.loss.edge_weight}, {"edge_dilation", s.loss.edge_dilation}}},
          {"optimizer", to_json(s.optimizer)},
          {"window", {{"hu_min", s.window.hu_min}, {"hu_max", s.window.hu_max}}},
          {"calcium_threshold_hu", s.calcium_threshold_hu},
          {"label_fraction", s.label_fraction},
          {"seed", s.seed},
          {"out_dir", s.out_dir.string()},
          {"init_checkpoint", s.init_checkpoint.string()},
          {"augment", s.augment},
          {"checkpoint_every", s.checkpoint_every}};
}

RunSpec run_spec_from_json(const nlohmann::json& j) {
  RunSpec s;
  try {
    if (j.contains("mode")) s.mode = parse_mode(j.at("mode").get<std::string>());
    s.manifest = j.value("manifest", std::string());
    if (j.contains("masking")) {
      const auto& m = j.at("masking");
      if (m.contains("strategy")) s.masking.strategy = parse_strategy(m.at("strategy").get<std::string>());
      s.masking.token_edge = m.value("token_edge", s.masking.token_edge);
      s.masking.ratio = m.value("ratio", s.masking.ratio);
      s.masking.vessel_beta = m.value("vessel_beta", s.masking.vessel_beta);
      s.masking.center_cube = m.value("center_cube", s.masking.center_cube);
      s.masking.cube_from_calcium = m.value("cube_from_calcium", s.masking.cube_from_calcium);
    }
    if (j.contains("model")) s.model = model_config_from_json(j.at("model"));
    if (j.contains("loss")) {
      s.loss.edge_weight = j.at("loss").value("edge_weight", s.loss.edge_weight);
      s.loss.edge_dilation = j.at("loss").value("edge_dilation", s.loss.edge_dilation);
    }
    if (j.contains("optimizer")) s.optimizer = optimizer_config_from_json(j.at("optimizer"));
    if (j.contains("window")) {
      s.window.hu_min = j.at("window").value("hu_min", s.window.hu_min);
      s.window.hu_max = j.at("window").value("hu_max", s.window.hu_max);
    }
    s.calcium_threshold_hu = j.value("calcium_threshold_hu", s.calcium_threshold_hu);
    s.label_fraction = j.value("label_fraction", s.label_fraction);
    s.seed = j.value("seed", s.seed);
    s.out_dir = j.value("out_dir", std::string());
    s.init_checkpoint = j.value("init_checkpoint", std::string());
    s.augment = j.value("augment", s.augment);
    s.checkpoint_every = j.value("checkpoint_every", s.checkpoint_every);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("invalid run spec: ") + e.what());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------

Augmentation draw_augmentation(Rng& rng) {
  Augmentation a;
  a.quarter_turns = static_cast<int>(rng.below(4));
  a.flip_z = rng.bernoulli(0.5);
  return a;
}

namespace {

// Source index for output voxel (z, y, x) of an augmented grid; in-plane dims must be square.
template <class F>
void remap(Dims dims, const Augmentation& a, F&& copy) {
  const int D = dims.d, H = dims.h;
  const int k = ((a.quarter_turns % 4) + 4) % 4;
  for (int z = 0; z < D; ++z) {
    const int sz = a.flip_z ? D - 1 - z : z;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < H; ++x) {
        int sy = y, sx = x;
        // out(y, x) = in(H - 1 - x, y) per quarter turn.
        for (int r = 0; r < k; ++r) {
          const int ny = H - 1 - sx, nx = sy;
          sy = ny;
          sx = nx;
        }
        copy(z, y, x, sz, sy, sx);
      }
  }
}

void require_square(Dims d) {
  if (d.h != d.w) throw shape_error("rotation about z needs equal y and x extents, got " + to_string(d));
}

Spacing turned(Spacing s, int k) {
  if (k % 2) std::swap(s.y, s.x);
  return s;
}

}  // namespace

Volume apply_augmentation(const Volume& patch, const Augmentation& a) {
  require_square(patch.dims());
  const int k = ((a.quarter_turns % 4) + 4) % 4;
  Volume out(patch.dims(), turned(patch.spacing(), k), 0.0f);
  remap(patch.dims(), a, [&](int z, int y, int x, int sz, int sy, int sx) {
    out.at(z, y, x) = patch.at(sz, sy, sx);
  });
  if (patch.normalized()) out.set_normalized(true);
  return out;
}

VoxelMask apply_augmentation(const VoxelMask& mask, const Augmentation& a) {
  require_square(mask.dims);
  VoxelMask out(mask.dims);
  const Dims d = mask.dims;
  auto idx = [&](int z, int y, int x) { return (static_cast<std::size_t>(z) * d.h + y) * d.w + x; };
  remap(d, a, [&](int z, int y, int x, int sz, int sy, int sx) {
    out.bits[idx(z, y, x)] = mask.bits[idx(sz, sy, sx)];
  });
  return out;
}

Centerline apply_augmentation(const Centerline& cl, Dims dims, Spacing sp, const Augmentation& a) {
  require_square(dims);
  Centerline out = cl;
  const int k = ((a.quarter_turns % 4) + 4) % 4;
  for (auto& p : out.points) {
    double y = p.y, x = p.x;
    double sy = sp.y, sx = sp.x;
    // Each turn sends in (yi, xi) to out (xi, H - 1 - yi) and swaps the in-plane spacing.
    for (int r = 0; r < k; ++r) {
      const double ny = x, nx = (dims.h - 1) * sy - y;
      y = ny;
      x = nx;
      std::swap(sy, sx);
    }
    p.y = y;
    p.x = x;
    if (a.flip_z) p.z = (dims.d - 1) * static_cast<double>(sp.z) - p.z;
  }
  return out;
}

Augmented augment(const Volume& patch, const Centerline& cl, Rng& rng) {
  const Augmentation a = draw_augmentation(rng);
  return {apply_augmentation(patch, a), apply_augmentation(cl, patch.dims(), patch.spacing(), a)};
}

// ---------------------------------------------------------------------------

int covering_center_cube(const VoxelMask& region, const TokenGridSpec& grid) {
  const int P = grid.patch_edge, T = grid.token_edge, G = grid.grid_edge;
  if (region.dims != Dims{P, P, P}) {
    throw shape_error("region dims " + to_string(region.dims) + " do not match a " + std::to_string(P) +
                      "^3 patch");
  }
  int lo[3] = {G, G, G}, hi[3] = {-1, -1, -1};
  std::size_t i = 0;
  for (int z = 0; z < P; ++z)
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < P; ++x, ++i) {
        if (!region.bits[i]) continue;
        const int t[3] = {z / T, y / T, x / T};
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::min(lo[a], t[a]);
          hi[a] = std::max(hi[a], t[a]);
        }
      }
  if (hi[0] < 0) return G;
  for (int c = 1; c < G; ++c) {
    const int first = (G - c) / 2, last = first + c - 1;
    bool covers = true;
    for (int a = 0; a < 3; ++a) covers = covers && first <= lo[a] && hi[a] <= last;
    if (covers) return c;
  }
  return G;
}

std::vector<TrainingSample> load_pretrain_samples(const Manifest& manifest, Split split,
                                                  const WindowSpec& window) {
  std::vector<TrainingSample> out;
  for (const ManifestEntry* e : manifest.select(SampleRole::kHealthy, split)) {
    out.push_back({e->id, window_normalize(load_volume(manifest.resolve(e->volume)), window),
                   e->centerline, 0});
  }
  return out;
}

std::vector<TrainingSample> load_finetune_samples(const Manifest& manifest, Split split,
                                                  double fraction, const RunSpec& spec) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw config_error("label fraction must lie in (0, 1]");
  const auto pairs = manifest.select(SampleRole::kCalcified, split);
  // The epsilon keeps ceil exact for fractions like 0.1 whose binary product overshoots.
  const auto keep = std::min(pairs.size(), static_cast<std::size_t>(
                                               std::ceil(fraction * pairs.size() - 1e-9)));
  const TokenGridSpec grid = partition(spec.model.patch_edge, spec.masking.token_edge);
  std::vector<TrainingSample> out;
  for (std::size_t i = 0; i < keep; ++i) {
    const ManifestEntry& e = *pairs[i];
    TrainingSample s{e.id, window_normalize(load_volume(manifest.resolve(e.clean)), spec.window),
                     e.centerline, spec.masking.center_cube};
    if (spec.masking.cube_from_calcium) {
      const Volume corrupted = load_volume(manifest.resolve(e.corrupted));
      s.center_cube = covering_center_cube(threshold_mask(corrupted, spec.calcium_threshold_hu), grid);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'D', 'M', 'C', 'K'};
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <class U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

}  // namespace

Checkpoint capture(const Model& model) {
  Checkpoint c;
  c.model = model.config();
  for (const auto* p : model.parameters()) c.parameters.emplace_back(p->name, p->value);
  for (auto* n : const_cast<Model&>(model).norms()) {
    c.buffers.emplace_back(n->gamma.name + ".running_mean", n->running_mean);
    c.buffers.emplace_back(n->gamma.name + ".running_var", n->running_var);
  }
  return c;
}

void restore_weights(Model& model, const Checkpoint& ckpt) {
  if (!(ckpt.model == model.config())) {
    throw shape_error("checkpoint model config " + to_json(ckpt.model).dump() +
                      " is incompatible with " + to_json(model.config()).dump());
  }
  auto params = model.parameters();
  auto norms = model.norms();
  if (params.size() != ckpt.parameters.size() || 2 * norms.size() != ckpt.buffers.size()) {
    throw shape_error("checkpoint tensor count does not match the model");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, values] = ckpt.parameters[i];
    if (name != params[i]->name || values.size() != params[i]->size()) {
      throw shape_error("checkpoint tensor '" + name + "' does not match model parameter '" +
                        params[i]->name + "'");
    }
    params[i]->value = values;
  }
  for (std::size_t i = 0; i < norms.size(); ++i) {
    const auto& mean = ckpt.buffers[2 * i].second;
    const auto& var = ckpt.buffers[2 * i + 1].second;
    if (mean.size() != norms[i]->running_mean.size() || var.size() != norms[i]->running_var.size()) {
      throw shape_error("checkpoint buffer '" + ckpt.buffers[2 * i].first + "' has the wrong size");
    }
    norms[i]->running_mean = mean;
    norms[i]->running_var = var;
  }
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model m(ckpt.model, 0);
  restore_weights(m, ckpt);
  m.set_training(false);
  return m;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  nlohmann::json tensors = nlohmann::json::array();
  auto describe = [&](const std::string& name, const char* kind, std::size_t count) {
    tensors.push_back({{"name", name}, {"kind", kind}, {"count", count}});
  };
  for (const auto& [n, v] : c.parameters) describe(n, "parameter", v.size());
  for (const auto& [n, v] : c.buffers) describe(n, "buffer", v.size());
  for (const auto& s : c.adam) {
    describe(s.name, "adam_m", s.m.size());
    describe(s.name, "adam_v", s.v.size());
  }
  const nlohmann::json header = {{"model", to_json(c.model)}, {"run", c.run},
                                 {"epoch", c.epoch},          {"step", c.step},
                                 {"adam_steps", c.adam_steps}, {"tensors", tensors}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw io_error("cannot open " + tmp.string() + " for writing");
    out.write(kCheckpointMagic, 4);
    put<std::uint16_t>(out, kCheckpointVersion);
    put<std::uint16_t>(out, 0);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    auto data = [&](const std::vector<float>& v) {
      out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
    };
    for (const auto& p : c.parameters) data(p.second);
    for (const auto& b : c.buffers) data(b.second);
    for (const auto& s : c.adam) {
      data(s.m);
      data(s.v);
    }
    if (!out) throw io_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint " + path.string());
  auto fail = [&](const std::string& what) { return parse_error(path.string() + ": " + what); };
  char magic[4];
  if (!in.read(magic, 4)) throw fail("truncated checkpoint: missing magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw fail("not a checkpoint file (bad magic)");
  std::uint16_t version = 0, reserved = 0;
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&version), 2);
  in.read(reinterpret_cast<char*>(&reserved), 2);
  in.read(reinterpret_cast<char*>(&header_len), 8);
  if (!in) throw fail("truncated checkpoint header");
  if (version != kCheckpointVersion) {
    throw fail("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
               std::to_string(kCheckpointVersion) + ")");
  }
  if (header_len > (1u << 28)) throw fail("corrupt checkpoint header length");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) throw fail("truncated checkpoint header");
  Checkpoint c;
  try {
    const auto header = nlohmann::json::parse(text);
    c.model = model_config_from_json(header.at("model"));
    c.run = header.at("run");
    c.epoch = header.at("epoch").get<int>();
    c.step = header.at("step").get<std::size_t>();
    c.adam_steps = header.at("adam_steps").get<std::size_t>();
    for (const auto& t : header.at("tensors")) {
      const std::string name = t.at("name").get<std::string>();
      const std::string kind = t.at("kind").get<std::string>();
      const std::size_t count = t.at("count").get<std::size_t>();
      std::vector<float> v(count);
      if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * 4))) {
        throw fail("truncated checkpoint payload at tensor '" + name + "'");
      }
      if (kind == "parameter") {
        c.parameters.emplace_back(name, std::move(v));
      } else if (kind == "buffer") {
        c.buffers.emplace_back(name, std::move(v));
      } else if (kind == "adam_m") {
        c.adam.push_back({name, std::move(v), {}});
      } else if (kind == "adam_v") {
        if (c.adam.empty() || c.adam.back().name != name) throw fail("adam moments out of order");
        c.adam.back().v = std::move(v);
      } else {
        throw fail("unknown tensor kind '" + kind + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed checkpoint header: ") + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw fail("trailing bytes after checkpoint payload");
  return c;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(RunSpec spec, std::vector<TrainingSample> train, std::vector<TrainingSample> val)
    : spec_(std::move(spec)),
      train_(std::move(train)),
      val_(std::move(val)),
      grid_(partition(spec_.model.patch_edge, spec_.masking.token_edge)),
      model_(spec_.model, derive_seed(spec_.seed, {kModelStream})),
      optimizer_(spec_.optimizer) {
  spec_.validate();
  if (train_.empty()) {
    throw training_error(std::string("no training samples for ") + mode_name(spec_.mode) +
                         (spec_.mode == RunMode::kPretrain ? " (healthy train split is empty)"
                                                           : " (calcified train split is empty)"));
  }
  const int P = spec_.model.patch_edge;
  for (const auto* set : {&train_, &val_})
    for (const auto& s : *set)
      if (s.target.dims() != Dims{P, P, P} || !s.target.normalized()) {
        throw shape_error("sample " + s.id + " is not a normalized " + std::to_string(P) + "^3 patch");
      }
  schedule_ = schedule_shape(spec_.optimizer, train_.size());
  model_.set_training(true);
}

void Trainer::init_from(const Checkpoint& ckpt) { restore_weights(model_, ckpt); }

void Trainer::resume(const Checkpoint& ckpt) {
  restore_weights(model_, ckpt);
  optimizer_.restore(ckpt.adam, ckpt.adam_steps);
  epoch_ = ckpt.epoch;
  step_ = ckpt.step;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c = capture(model_);
  c.run = to_json(spec_);
  c.epoch = epoch_;
  c.step = step_;
  c.adam = optimizer_.slots();
  c.adam_steps = optimizer_.steps_taken();
  return c;
}

TokenMask Trainer::draw_mask(const TrainingSample& s, const Centerline& cl, Rng& rng) const {
  if (spec_.mode != RunMode::kPretrain || spec_.masking.strategy == MaskStrategy::kCenter) {
    return center_mask(grid_, s.center_cube > 0 ? s.center_cube : spec_.masking.center_cube);
  }
  if (spec_.masking.strategy == MaskStrategy::kVesselAware) {
    return vessel_aware_mask(grid_, cl, PatchFrame{s.target.spacing(), {}}, spec_.masking.ratio,
                             spec_.masking.vessel_beta, rng);
  }
  return random_mask(grid_, spec_.masking.ratio, rng);
}

TokenMask Trainer::validation_mask(std::size_t index) const {
  Rng rng(derive_seed(spec_.seed, {kValidationStream, index}));
  return draw_mask(val_[index], val_[index].centerline, rng);
}

namespace {

void fill_input(nn::Tensor<float>& in, int i, const Volume& target, const VoxelMask& mask) {
  float* x = in.channel(i, 0);
  const std::size_t V = target.size();
  for (std::size_t v = 0; v < V; ++v) x[v] = mask.bits[v] ? 0.0f : target[v];
  if (in.c > 1) {
    float* m = in.channel(i, 1);
    for (std::size_t v = 0; v < V; ++v) m[v] = mask.bits[v] ? 1.0f : 0.0f;
  }
}

void write_record(std::ostream* log, const nlohmann::json& j) {
  if (log) *log << j.dump() << '\n';
}

}  // namespace

EpochRecord Trainer::run_epoch() {
  const int P = spec_.model.patch_edge;
  const Dims dims{P, P, P};
  const std::size_t V = dims.voxels();
  const int B = spec_.optimizer.batch_size;
  const int epoch = epoch_;  // 0-based index of the epoch being run

  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle(derive_seed(spec_.seed, {kShuffleStream, static_cast<std::uint64_t>(epoch)}));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

  model_.set_training(true);
  auto params = model_.parameters();
  EpochRecord rec;
  rec.epoch = epoch + 1;
  std::size_t batches = 0;
  nn::Tensor<float> input, grad;
  std::vector<float> targets;
  std::vector<VoxelMask> masks;
  for (std::size_t start = 0; start < order.size(); start += B) {
    const int n = static_cast<int>(std::min<std::size_t>(B, order.size() - start));
    input.resize(n, spec_.model.input_channels(), P, P, P);
    grad.resize(n, 1, P, P, P);
    targets.assign(n * V, 0.0f);
    masks.assign(n, VoxelMask());
    for (int i = 0; i < n; ++i) {
      const std::size_t idx = order[start + i];
      const TrainingSample& s = train_[idx];
      Rng rng(derive_seed(spec_.seed, {kSampleStream, static_cast<std::uint64_t>(epoch), idx}));
      Volume target = s.target;
      Centerline cl = s.centerline;
      if (spec_.augment) {
        const Augmentation a = draw_augmentation(rng);
        target = apply_augmentation(s.target, a);
        cl = apply_augmentation(s.centerline, s.target.dims(), s.target.spacing(), a);
      }
      masks[i] = upsample_mask(draw_mask(s, cl, rng));
      std::copy(target.raw().begin(), target.raw().end(), targets.begin() + i * V);
      fill_input(input, i, target, masks[i]);
    }

    model_.zero_grad();
    const nn::Tensor<float>& out = model_.forward(input);
    LossTerms terms;
    for (int i = 0; i < n; ++i) {
      const LossTerms t = total_loss<float>(
          std::span<const float>(out.channel(i, 0), V), std::span<const float>(targets.data() + i * V, V),
          masks[i].bits, dims, spec_.loss, std::span<float>(grad.channel(i, 0), V), 1.0 / n);
      terms.mse += t.mse / n;
      terms.edge += t.edge / n;
      terms.total += t.total / n;
    }
    const double lr = lr_at(step_ + 1, spec_.optimizer, schedule_);
    if (!std::isfinite(terms.total)) {
      std::ostringstream os;
      os << "non-finite loss at step " << step_ + 1 << " (epoch " << epoch + 1 << ", lr " << lr
         << ", mse " << terms.mse << ", edge " << terms.edge << ", total " << terms.total << ")";
      throw training_error(os.str());
    }
    model_.backward(grad);
    optimizer_.step(params, lr);
    ++step_;
    ++batches;
    step_log_.push_back({step_, epoch + 1, lr, terms});
    write_record(log_, {{"type", "step"}, {"epoch", epoch + 1}, {"step", step_}, {"lr", lr},
                        {"mse", terms.mse}, {"edge", terms.edge}, {"total", terms.total}});
    rec.train.mse += terms.mse;
    rec.train.edge += terms.edge;
    rec.train.total += terms.total;
    rec.lr = lr;
  }
  rec.train.mse /= batches;
  rec.train.edge /= batches;
  rec.train.total /= batches;
  ++epoch_;
  rec.step = step_;
  rec.val_mse = validate();
  write_record(log_, {{"type", "epoch"}, {"epoch", rec.epoch}, {"step", rec.step}, {"lr", rec.lr},
                      {"train_mse", rec.train.mse}, {"train_edge", rec.train.edge},
                      {"train_total", rec.train.total}, {"val_mse", rec.val_mse}});
  return rec;
}

double Trainer::validate() {
  if (val_.empty()) return std::nan("");
  const int P = spec_.model.patch_edge;
  const std::size_t V = static_cast<std::size_t>(P) * P * P;
  const int B = spec_.optimizer.batch_size;
  const bool was_training = model_.training();
  model_.set_training(false);
  double sum = 0.0;
  nn::Tensor<float> input;
  for (std::size_t start = 0; start < val_.size(); start += B) {
    const int n = static_cast<int>(std::min<std::size_t>(B, val_.size() - start));
    input.resize(n, spec_.model.input_channels(), P, P, P);
    std::vector<VoxelMask> masks(n);
    for (int i = 0; i < n; ++i) {
      masks[i] = upsample_mask(validation_mask(start + i));
      fill_input(input, i, val_[start + i].target, masks[i]);
    }
    const nn::Tensor<float>& out = model_.forward(input);
    for (int i = 0; i < n; ++i) {
      sum += masked_mse<float>(std::span<const float>(out.channel(i, 0), V),
                               val_[start + i].target.values(), masks[i].bits);
    }
  }
  model_.set_training(was_training);
  return sum / val_.size();
}

std::vector<EpochRecord> Trainer::run() {
  std::vector<EpochRecord> out;
  while (epoch_ < spec_.optimizer.epochs) {
    out.push_back(run_epoch());
    if (!spec_.out_dir.empty() && spec_.checkpoint_every > 0 && epoch_ % spec_.checkpoint_every == 0 &&
        epoch_ < spec_.optimizer.epochs) {
      std::ostringstream name;
      name << "checkpoint_epoch_" << std::setw(4) << std::setfill('0') << epoch_ << ".dmck";
      save_checkpoint(checkpoint(), spec_.out_dir / name.str());
    }
  }
  if (!spec_.out_dir.empty()) save_checkpoint(checkpoint(), spec_.out_dir / "checkpoint_final.dmck");
  return out;
}

namespace {

RunOutcome run_training(const RunSpec& spec, std::vector<TrainingSample> train,
                        std::vector<TrainingSample> val, const Checkpoint* init) {
  Trainer trainer(spec, std::move(train), std::move(val));
  if (init) trainer.init_from(*init);
  std::ofstream log;
  if (!spec.out_dir.empty()) {
    std::filesystem::create_directories(spec.out_dir);
    const auto path = spec.out_dir / "train_log.jsonl";
    log.open(path, std::ios::binary);
    if (!log) throw io_error("cannot open " + path.string() + " for writing");
    trainer.set_log(&log);
  }
  RunOutcome outcome;
  outcome.epochs = trainer.run();
  outcome.state = trainer.checkpoint();
  if (!spec.out_dir.empty()) outcome.checkpoint = spec.out_dir / "checkpoint_final.dmck";
  return outcome;
}

}  // namespace

RunOutcome pretrain(const RunSpec& spec) {
  spec.validate();
  if (spec.mode != RunMode::kPretrain) throw config_error("pretrain requires mode 'pretrain'");
  const Manifest m = load_manifest(spec.manifest);
  return run_training(spec, load_pretrain_samples(m, Split::kTrain, spec.window),
                      load_pretrain_samples(m, Split::kVal, spec.window), nullptr);
}

RunOutcome finetune(const RunSpec& spec) {
  spec.validate();
  if (spec.mode == RunMode::kPretrain) throw config_error("finetune requires mode 'finetune' or 'scratch'");
  const Manifest m = load_manifest(spec.manifest);
  Checkpoint init;
  const bool has_init = spec.mode == RunMode::kFinetune && !spec.init_checkpoint.empty();
  if (has_init) init = load_checkpoint(spec.init_checkpoint);
  return run_training(spec, load_finetune_samples(m, Split::kTrain, spec.label_fraction, spec),
                      load_finetune_samples(m, Split::kVal, 1.0, spec), has_init ? &init : nullptr);
}

// ---------------------------------------------------------------------------

VoxelMask inpaint_mask(const Volume& corrupted_hu, float calcium_threshold_hu, int token_edge,
                       int* cube_tokens) {
  const Dims d = corrupted_hu.dims();
  if (d.d != d.h || d.h != d.w) throw shape_error("inpaint mask needs a cubic patch, got " + to_string(d));
  const VoxelMask calcium = threshold_mask(corrupted_hu, calcium_threshold_hu);
  if (cube_tokens) *cube_tokens = 0;
  if (calcium.empty()) return VoxelMask(d);
  const TokenGridSpec grid = partition(d.d, token_edge);
  const int cube = covering_center_cube(calcium, grid);
  if (cube_tokens) *cube_tokens = cube;
  return upsample_mask(center_mask(grid, cube));
}

InpaintResult inpaint(Model& model, const Volume& corrupted_hu, float calcium_threshold_hu,
                      const WindowSpec& window, int token_edge) {
  const int P = model.config().patch_edge;
  if (corrupted_hu.dims() != Dims{P, P, P}) {
    throw shape_error("inpaint: patch dims " + to_string(corrupted_hu.dims()) + " do not match the model's " +
                      std::to_string(P) + "^3 input");
  }
  if (corrupted_hu.normalized()) throw invalid_argument("inpaint expects an HU patch");
  InpaintResult r;
  r.repaired = window_normalize(corrupted_hu, window);
  r.mask = inpaint_mask(corrupted_hu, calcium_threshold_hu, token_edge, &r.cube_tokens);
  if (r.cube_tokens == 0) {
    r.status = InpaintStatus::kNoCalcium;
    return r;
  }
  const bool was_training = model.training();
  model.set_training(false);
  const Volume recon = reconstruct(model, apply_mask(r.repaired, r.mask), r.mask);
  model.set_training(was_training);
  for (std::size_t i = 0; i < recon.size(); ++i)
    if (r.mask.bits[i]) r.repaired[i] = recon[i];
  return r;
}

}  // namespace densemae
