#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "densemae/centerline.hpp"
#include "densemae/dataset.hpp"
#include "densemae/losses.hpp"
#include "densemae/masking.hpp"
#include "densemae/model.hpp"
#include "densemae/optimizer.hpp"
#include "densemae/volume.hpp"
#include "json.hpp"

namespace densemae {

enum class RunMode { kPretrain, kFinetune, kScratch };
enum class MaskStrategy { kRandom, kVesselAware, kCenter };

const char* mode_name(RunMode m);
const char* strategy_name(MaskStrategy s);

struct MaskingConfig {
  MaskStrategy strategy = MaskStrategy::kRandom;
  int token_edge = 4;
  double ratio = 0.6;
  double vessel_beta = 0.7;
  int center_cube = 4;
  // Finetuning sizes each pair's centre cube to cover its calcium region,
  // the same rule inpaint applies; otherwise center_cube is used throughout.
  bool cube_from_calcium = true;
};

struct RunSpec {
  RunMode mode = RunMode::kPretrain;
  std::filesystem::path manifest;
  MaskingConfig masking;
  DenseUnetConfig model;
  LossConfig loss;
  OptimizerConfig optimizer;
  WindowSpec window;
  float calcium_threshold_hu = kDefaultCalciumThresholdHu;
  double label_fraction = 1.0;  // finetune / scratch
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  std::filesystem::path init_checkpoint;  // finetune only
  bool augment = true;
  int checkpoint_every = 0;  // epochs between periodic checkpoints; 0 = final only

  void validate() const;
};

nlohmann::json to_json(const RunSpec& spec);
RunSpec run_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DenseUnetConfig& cfg);
DenseUnetConfig model_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Augmentation: k quarter turns in the (y, x) plane, then an optional z flip.

struct Augmentation {
  int quarter_turns = 0;
  bool flip_z = false;
};

Augmentation draw_augmentation(Rng& rng);
Volume apply_augmentation(const Volume& patch, const Augmentation& a);
VoxelMask apply_augmentation(const VoxelMask& mask, const Augmentation& a);
// Centerline in the patch frame of `patch_dims` / `spacing` (before augmentation).
Centerline apply_augmentation(const Centerline& cl, Dims patch_dims, Spacing spacing,
                              const Augmentation& a);

struct Augmented {
  Volume patch;
  Centerline centerline;
};
Augmented augment(const Volume& patch, const Centerline& cl, Rng& rng);

// ---------------------------------------------------------------------------

struct TrainingSample {
  std::string id;
  Volume target;          // normalized patch
  Centerline centerline;  // patch frame
  int center_cube = 0;    // finetune: token cube edge; 0 = masking config
};

// Healthy patches of a split, window-normalized.
std::vector<TrainingSample> load_pretrain_samples(const Manifest& manifest, Split split,
                                                  const WindowSpec& window);
// Calcified pairs of a split (clean patch as target); `fraction` keeps the
// first ceil(fraction * n) entries in manifest order.
std::vector<TrainingSample> load_finetune_samples(const Manifest& manifest, Split split,
                                                  double fraction, const RunSpec& spec);

// Smallest C with the centre C^3 token cube covering every set voxel (G if empty).
int covering_center_cube(const VoxelMask& region, const TokenGridSpec& grid);

struct StepRecord {
  std::size_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  LossTerms loss;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  std::size_t step = 0;
  double lr = 0.0;
  LossTerms train;    // mean over the epoch's batches
  double val_mse = 0.0;  // masked MSE on the fixed validation masks, eval mode
};

struct Checkpoint {
  DenseUnetConfig model;
  nlohmann::json run;  // RunSpec echo
  int epoch = 0;
  std::size_t step = 0;
  std::vector<std::pair<std::string, std::vector<float>>> parameters;
  std::vector<std::pair<std::string, std::vector<float>>> buffers;  // batch-norm running stats
  std::vector<AdamW::Slot> adam;
  std::size_t adam_steps = 0;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint capture(const Model& model);
// Verifies names and shapes against the model's config before copying.
void restore_weights(Model& model, const Checkpoint& ckpt);
Model model_from_checkpoint(const Checkpoint& ckpt);

// One owned training loop (single writer of model and optimizer state).
class Trainer {
 public:
  Trainer(RunSpec spec, std::vector<TrainingSample> train, std::vector<TrainingSample> val);

  // Weights only (finetune initialisation); optimizer and counters stay fresh.
  void init_from(const Checkpoint& ckpt);
  // Weights, optimizer moments and counters.
  void resume(const Checkpoint& ckpt);

  // Line-delimited JSON step/epoch records.
  void set_log(std::ostream* log) { log_ = log; }

  EpochRecord run_epoch();
  // Runs to the configured epoch count, writing periodic and final checkpoints
  // under out_dir when it is set.
  std::vector<EpochRecord> run();
  double validate();

  Model& model() { return model_; }
  const RunSpec& spec() const { return spec_; }
  int epoch() const { return epoch_; }
  std::size_t step() const { return step_; }
  const ScheduleShape& schedule() const { return schedule_; }
  const std::vector<StepRecord>& steps() const { return step_log_; }
  Checkpoint checkpoint() const;

 private:
  TokenMask draw_mask(const TrainingSample& s, const Centerline& cl, Rng& rng) const;
  TokenMask validation_mask(std::size_t index) const;

  RunSpec spec_;
  std::vector<TrainingSample> train_, val_;
  TokenGridSpec grid_;
  Model model_;
  AdamW optimizer_;
  ScheduleShape schedule_;
  int epoch_ = 0;
  std::size_t step_ = 0;
  std::ostream* log_ = nullptr;
  std::vector<StepRecord> step_log_;
};

// Loads the samples a RunSpec names (pretrain: healthy; finetune/scratch:
// calcified pairs), applies init_checkpoint for finetune, and trains.
struct RunOutcome {
  std::vector<EpochRecord> epochs;
  std::filesystem::path checkpoint;  // final checkpoint (empty without out_dir)
  Checkpoint state;
};
RunOutcome pretrain(const RunSpec& spec);
RunOutcome finetune(const RunSpec& spec);

// ---------------------------------------------------------------------------

enum class InpaintStatus { kRepaired, kNoCalcium };

struct InpaintResult {
  Volume repaired;  // normalized
  InpaintStatus status = InpaintStatus::kRepaired;
  int cube_tokens = 0;
  VoxelMask mask;  // voxels replaced by the reconstruction
};

// Voxels inpaint replaces: the smallest covering centre cube of the calcium
// set (>= threshold), or an empty mask when there is no calcium.
VoxelMask inpaint_mask(const Volume& corrupted_hu, float calcium_threshold_hu, int token_edge,
                       int* cube_tokens = nullptr);

// Eval-mode repair of an HU patch: the calcium set (>= threshold) selects the
// smallest covering centre cube, which is masked, reconstructed and composited.
InpaintResult inpaint(Model& model, const Volume& corrupted_hu, float calcium_threshold_hu,
                      const WindowSpec& window, int token_edge);

}  // namespace densemae
