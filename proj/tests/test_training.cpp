#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "densemae/dataset.hpp"
#include "densemae/errors.hpp"
#include "densemae/masking.hpp"
#include "densemae/phantom.hpp"
#include "densemae/rng.hpp"
#include "densemae/training.hpp"

using namespace densemae;
namespace fs = std::filesystem;

namespace {

DenseUnetConfig tiny_model(int P) {
  DenseUnetConfig c;
  c.patch_edge = P;
  c.stem_channels = 4;
  c.growth = 2;
  c.layers_per_block = 1;
  c.levels = 2;
  return c;
}

RunSpec tiny_spec(int P, int epochs, int batch) {
  RunSpec s;
  s.model = tiny_model(P);
  s.masking.token_edge = 2;
  s.optimizer.epochs = epochs;
  s.optimizer.warmup_epochs = 0;
  s.optimizer.batch_size = batch;
  s.optimizer.lr = 1e-3;
  s.seed = 5;
  return s;
}

std::vector<TrainingSample> random_samples(int n, int P, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TrainingSample> out;
  for (int i = 0; i < n; ++i) {
    TrainingSample s;
    s.id = "s" + std::to_string(i);
    s.target = Volume(Dims{P, P, P}, Spacing{0.5f, 0.5f, 0.5f}, 0.0f, true);
    for (auto& v : s.target.raw()) v = static_cast<float>(0.2 + 0.2 * rng.uniform());
    const double c = (P - 1) * 0.25;
    s.centerline.points = {{0.0, c, c}, {(P - 1) * 0.5, c, c}};
    s.centerline.radii = {1.0, 1.0};
    out.push_back(std::move(s));
  }
  return out;
}

DatasetSpec small_dataset_spec() {
  DatasetSpec d;
  d.phantom.dims = Dims{40, 24, 24};
  d.patch_edge = 16;
  return d;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<float> forward_copy(Model& m, const Volume& v) {
  const VoxelMask mask(v.dims());
  m.set_training(false);
  return reconstruct(m, v, mask).raw();
}

}  // namespace

TEST(LrSchedule, Examples) {
  OptimizerConfig cfg;
  cfg.epochs = 10;
  cfg.warmup_epochs = 2;
  cfg.batch_size = 4;
  const ScheduleShape shape = schedule_shape(cfg, 40);  // 10 steps per epoch
  EXPECT_EQ(shape.total_steps, 100u);
  EXPECT_EQ(shape.warmup_steps, 20u);
  EXPECT_EQ(lr_at(0, cfg, shape), 0.0);
  EXPECT_NEAR(lr_at(10, cfg, shape), 0.5 * cfg.lr, 1e-15);
  EXPECT_NEAR(lr_at(20, cfg, shape), cfg.lr, 1e-15);
  EXPECT_NEAR(lr_at(60, cfg, shape), 0.5 * cfg.lr, 1e-6 * cfg.lr);
  EXPECT_LE(lr_at(100, cfg, shape), 1e-8 * cfg.lr);
  double last = cfg.lr;
  for (std::size_t k = 21; k <= 100; ++k) {
    ASSERT_LE(lr_at(k, cfg, shape), last);
    last = lr_at(k, cfg, shape);
  }
  cfg.warmup_epochs = 11;
  EXPECT_THROW(schedule_shape(cfg, 40), Error);
}

TEST(Augmentation, IdentityInvolutionAndMultiset) {
  Rng rng(1);
  Volume v(Dims{5, 6, 6}, Spacing{0.5f, 0.4f, 0.7f}, 0.0f, true);
  for (auto& x : v.raw()) x = static_cast<float>(rng.uniform());
  EXPECT_EQ(apply_augmentation(v, Augmentation{}).raw(), v.raw());
  const Augmentation half{2, false};
  EXPECT_EQ(apply_augmentation(apply_augmentation(v, half), half).raw(), v.raw());
  const Augmentation flip{0, true};
  EXPECT_EQ(apply_augmentation(apply_augmentation(v, flip), flip).raw(), v.raw());
  Volume four = v;
  for (int i = 0; i < 4; ++i) four = apply_augmentation(four, Augmentation{1, false});
  EXPECT_EQ(four.raw(), v.raw());
  std::vector<float> sorted = v.raw();
  std::sort(sorted.begin(), sorted.end());
  for (int k = 0; k < 4; ++k)
    for (bool f : {false, true}) {
      const Volume a = apply_augmentation(v, Augmentation{k, f});
      std::vector<float> s = a.raw();
      std::sort(s.begin(), s.end());
      ASSERT_EQ(s, sorted);
      const Spacing sp = a.spacing();
      ASSERT_EQ(sp.z, 0.5f);
      ASSERT_EQ(k % 2 ? sp.y : sp.x, 0.7f);
    }
}

TEST(Augmentation, CenterlineFollowsVoxels) {
  const Dims d{6, 8, 8};
  const Spacing sp{0.5f, 0.4f, 0.7f};
  Rng rng(2);
  for (int rep = 0; rep < 40; ++rep) {
    const Index3 p{int(rng.below(6)), int(rng.below(8)), int(rng.below(8))};
    Volume v(d, sp, 0.0f, true);
    v.at(p.z, p.y, p.x) = 1.0f;
    VoxelMask m(d);
    m.bits[v.index(p.z, p.y, p.x)] = 1;
    Centerline cl;
    cl.points = {{p.z * double(sp.z), p.y * double(sp.y), p.x * double(sp.x)}};
    cl.radii = {1.0};
    const Augmentation a{int(rng.below(4)), rng.bernoulli(0.5)};
    const Volume av = apply_augmentation(v, a);
    const VoxelMask am = apply_augmentation(m, a);
    const Centerline ac = apply_augmentation(cl, d, sp, a);
    const Spacing as = av.spacing();
    const int z = static_cast<int>(std::lround(ac.points[0].z / as.z));
    const int y = static_cast<int>(std::lround(ac.points[0].y / as.y));
    const int x = static_cast<int>(std::lround(ac.points[0].x / as.x));
    ASSERT_TRUE(av.dims().contains(z, y, x));
    ASSERT_EQ(av.at(z, y, x), 1.0f) << a.quarter_turns << " " << a.flip_z;
    ASSERT_EQ(am.bits[av.index(z, y, x)], 1);
  }
}

TEST(CoveringCenterCube, SmallestCover) {
  const TokenGridSpec g = partition(32, 4);
  EXPECT_EQ(covering_center_cube(VoxelMask(Dims{32, 32, 32}), g), 8);
  Rng rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    VoxelMask r(Dims{32, 32, 32});
    const int n = 1 + int(rng.below(4));
    for (int i = 0; i < n; ++i) r.bits[rng.below(r.bits.size())] = 1;
    const int c = covering_center_cube(r, g);
    auto covers = [&](int cube) {
      const VoxelMask up = upsample_mask(center_mask(g, cube));
      for (std::size_t i = 0; i < r.bits.size(); ++i)
        if (r.bits[i] && !up.bits[i]) return false;
      return true;
    };
    ASSERT_TRUE(covers(c));
    if (c > 1) {
      ASSERT_FALSE(covers(c - 1));
    }
  }
}

TEST(RunSpec, ValidationAndJson) {
  RunSpec s = tiny_spec(8, 2, 4);
  s.masking.ratio = 1.0;
  EXPECT_THROW(s.validate(), Error);
  s.masking.ratio = 0.6;
  s.mode = RunMode::kScratch;
  s.init_checkpoint = "x.dmck";
  EXPECT_THROW(s.validate(), Error);
  s.init_checkpoint.clear();
  s.label_fraction = 0.0;
  EXPECT_THROW(s.validate(), Error);
  s.label_fraction = 0.25;
  s.masking.strategy = MaskStrategy::kVesselAware;
  const RunSpec back = run_spec_from_json(to_json(s));
  EXPECT_EQ(to_json(back), to_json(s));
  EXPECT_EQ(back.model, s.model);
  EXPECT_EQ(back.optimizer.batch_size, 4);
}

TEST(Trainer, OneEpochEightPatchesBatchFourTakesTwoSteps) {
  Trainer t(tiny_spec(8, 1, 4), random_samples(8, 8, 1), random_samples(2, 8, 2));
  std::ostringstream log;
  t.set_log(&log);
  const auto epochs = t.run();
  ASSERT_EQ(epochs.size(), 1u);
  EXPECT_EQ(t.step(), 2u);
  EXPECT_EQ(t.steps().size(), 2u);
  std::istringstream in(log.str());
  std::string line;
  int steps = 0, epoch_lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    steps += j.at("type") == "step";
    epoch_lines += j.at("type") == "epoch";
  }
  EXPECT_EQ(steps, 2);
  EXPECT_EQ(epoch_lines, 1);

  Trainer u(tiny_spec(8, 3, 4), random_samples(10, 8, 1), {});
  u.run();
  EXPECT_EQ(u.step(), 9u);
  EXPECT_EQ(u.schedule().total_steps, 9u);
}

TEST(Trainer, DeterministicGivenSeed) {
  auto run = [] {
    Trainer t(tiny_spec(8, 2, 3), random_samples(7, 8, 1), random_samples(3, 8, 2));
    std::vector<double> losses;
    for (const auto& e : t.run()) losses.push_back(e.val_mse);
    for (const auto& s : t.steps()) losses.push_back(s.loss.total);
    return losses;
  };
  EXPECT_EQ(run(), run());
}

TEST(Checkpoint, RoundTripForwardIsBitExact) {
  const fs::path dir = fresh_dir("densemae_test_ckpt");
  Trainer t(tiny_spec(8, 1, 4), random_samples(4, 8, 1), {});
  t.run();
  const Checkpoint c = t.checkpoint();
  save_checkpoint(c, dir / "a.dmck");
  const Checkpoint back = load_checkpoint(dir / "a.dmck");
  EXPECT_EQ(back.epoch, 1);
  EXPECT_EQ(back.step, t.step());
  EXPECT_EQ(back.adam_steps, c.adam_steps);
  EXPECT_EQ(back.model, c.model);
  Model a = model_from_checkpoint(c), b = model_from_checkpoint(back);
  const Volume probe = random_samples(1, 8, 9)[0].target;
  EXPECT_EQ(forward_copy(a, probe), forward_copy(b, probe));

  // Version bump -> structured parse error.
  std::fstream f(dir / "a.dmck", std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(4);
  const char bad[2] = {9, 0};
  f.write(bad, 2);
  f.close();
  try {
    load_checkpoint(dir / "a.dmck");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  EXPECT_THROW(load_checkpoint(dir / "missing.dmck"), Error);

  Model other(tiny_model(16), 1);
  EXPECT_THROW(restore_weights(other, c), Error);
  fs::remove_all(dir);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  const fs::path dir = fresh_dir("densemae_test_resume");
  const auto train = random_samples(6, 8, 1), val = random_samples(2, 8, 2);
  Trainer straight(tiny_spec(8, 3, 4), train, val);
  straight.run();

  Trainer first(tiny_spec(8, 3, 4), train, val);
  first.run_epoch();
  save_checkpoint(first.checkpoint(), dir / "e1.dmck");
  Trainer resumed(tiny_spec(8, 3, 4), train, val);
  resumed.resume(load_checkpoint(dir / "e1.dmck"));
  resumed.run();

  ASSERT_EQ(resumed.step(), straight.step());
  const auto& a = straight.steps();
  const auto& b = resumed.steps();
  ASSERT_EQ(b.size(), a.size() - 2);
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(b[i].loss.total, a[i + 2].loss.total) << i;
    EXPECT_EQ(b[i].lr, a[i + 2].lr);
  }
  fs::remove_all(dir);
}

TEST(Trainer, PeriodicAndFinalCheckpoints) {
  const fs::path dir = fresh_dir("densemae_test_periodic");
  RunSpec s = tiny_spec(8, 3, 4);
  s.out_dir = dir;
  s.checkpoint_every = 1;
  Trainer t(s, random_samples(4, 8, 1), {});
  t.run();
  EXPECT_TRUE(fs::exists(dir / "checkpoint_epoch_0001.dmck"));
  EXPECT_TRUE(fs::exists(dir / "checkpoint_epoch_0002.dmck"));
  EXPECT_TRUE(fs::exists(dir / "checkpoint_final.dmck"));
  EXPECT_EQ(load_checkpoint(dir / "checkpoint_final.dmck").epoch, 3);
  fs::remove_all(dir);
}

TEST(Trainer, RejectsEmptyAndMisshapenData) {
  EXPECT_THROW(Trainer(tiny_spec(8, 1, 4), {}, {}), Error);
  EXPECT_THROW(Trainer(tiny_spec(8, 1, 4), random_samples(2, 16, 1), {}), Error);
}

TEST(Finetune, LabelFractionAndInitDifference) {
  const fs::path dir = fresh_dir("densemae_test_finetune");
  DatasetSpec ds = small_dataset_spec();
  ds.val_fraction = 0.0;
  ds.test_fraction = 0.0;
  const Manifest m = build_dataset(0, 100, dir, ds, 4);
  RunSpec s = tiny_spec(16, 1, 8);
  s.masking.token_edge = 4;
  s.mode = RunMode::kFinetune;
  EXPECT_EQ(load_finetune_samples(m, Split::kTrain, 0.25, s).size(), 25u);
  EXPECT_EQ(load_finetune_samples(m, Split::kTrain, 1.0, s).size(), 100u);
  EXPECT_EQ(load_finetune_samples(m, Split::kTrain, 0.1, s).size(), 10u);
  const auto few = load_finetune_samples(m, Split::kTrain, 0.08, s);
  ASSERT_EQ(few.size(), 8u);
  for (const auto& sample : few) {
    EXPECT_GE(sample.center_cube, 1);
    EXPECT_LE(sample.center_cube, 4);
  }

  Trainer scratch(s, few, {});
  Trainer pretrained(s, few, {});
  RunSpec other = s;
  other.seed = 99;
  Trainer source(other, few, {});
  pretrained.init_from(source.checkpoint());
  scratch.run_epoch();
  pretrained.run_epoch();
  EXPECT_NE(scratch.steps().front().loss.total, pretrained.steps().front().loss.total);
  fs::remove_all(dir);
}

TEST(Inpaint, HealthyPatchIsUnchangedAndVisibleVoxelsKept) {
  const DatasetSpec ds = small_dataset_spec();
  Model model(tiny_model(16), 3);
  const WindowSpec w;
  const HealthySample h = make_healthy_sample(ds, 11);
  const InpaintResult r = inpaint(model, h.patch.values, kDefaultCalciumThresholdHu, w, 4);
  EXPECT_EQ(r.status, InpaintStatus::kNoCalcium);
  EXPECT_EQ(r.repaired.raw(), window_normalize(h.patch.values, w).raw());

  const CalcifiedSample c = make_calcified_sample(ds, 12);
  const InpaintResult rc = inpaint(model, c.corrupted.values, kDefaultCalciumThresholdHu, w, 4);
  ASSERT_EQ(rc.status, InpaintStatus::kRepaired);
  const Volume norm = window_normalize(c.corrupted.values, w);
  const VoxelMask calcium = threshold_mask(c.corrupted.values, kDefaultCalciumThresholdHu);
  for (std::size_t i = 0; i < norm.size(); ++i) {
    if (!rc.mask.bits[i]) {
      ASSERT_EQ(rc.repaired[i], norm[i]);
    }
    if (calcium.bits[i]) {
      ASSERT_EQ(rc.mask.bits[i], 1);
    }
  }
  EXPECT_THROW(inpaint(model, norm, kDefaultCalciumThresholdHu, w, 4), Error);
}
