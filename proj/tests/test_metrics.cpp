#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "densemae/dataset.hpp"
#include "densemae/errors.hpp"
#include "densemae/metrics.hpp"
#include "densemae/rng.hpp"
#include "support/oracles.hpp"

using namespace densemae;

namespace {

Volume random_volume(Dims d, Rng& rng) {
  Volume v(d, Spacing{}, 0.0f, true);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(rng.uniform());
  return v;
}

VoxelMask random_mask(Dims d, double p, Rng& rng) {
  VoxelMask m(d);
  for (auto& b : m.bits) b = rng.bernoulli(p);
  if (m.empty()) m.bits[rng.below(m.bits.size())] = 1;
  return m;
}

Dims random_dims(Rng& rng, int lo, int hi) {
  auto e = [&] { return lo + static_cast<int>(rng.below(hi - lo + 1)); };
  return {e(), e(), e()};
}

}  // namespace

TEST(Psnr, Examples) {
  const Dims d{4, 4, 4};
  const Volume t(d, Spacing{}, 0.5f, true);
  EXPECT_TRUE(psnr(t, t).identical);
  Volume p = t;
  for (auto& v : p.raw()) v += 0.1f;
  EXPECT_NEAR(psnr(p, t).db, 20.0, 1e-5);
  Volume zero(d, Spacing{}, 0.0f, true), one(d, Spacing{}, 1.0f, true);
  EXPECT_NEAR(psnr(zero, one).db, 0.0, 1e-12);
  EXPECT_THROW(psnr(t, Volume(Dims{4, 4, 5}, Spacing{})), Error);
  EXPECT_THROW(psnr(t, t, 0.0), Error);
}

TEST(Psnr, MatchesIndexLoopAndDecreasesWithError) {
  Rng rng(1);
  for (int rep = 0; rep < 100; ++rep) {
    const Dims d = random_dims(rng, 1, 9);
    const Volume a = random_volume(d, rng), b = random_volume(d, rng);
    double sum = 0;
    for (std::size_t i = 0; i < a.size(); ++i) sum += std::pow(double(a[i]) - b[i], 2);
    ASSERT_NEAR(psnr(a, b).db, 10 * std::log10(1.0 / (sum / a.size())), 1e-6);
  }
  const Dims d{5, 5, 5};
  const Volume t = random_volume(d, rng);
  double last = std::numeric_limits<double>::infinity();
  for (float delta : {0.01f, 0.02f, 0.05f, 0.1f}) {
    Volume p = t;
    for (auto& v : p.raw()) v += delta;
    const double db = psnr(p, t).db;
    EXPECT_LT(db, last);
    last = db;
  }
}

TEST(Ssim, MatchesSlidingWindowOracle) {
  Rng rng(2);
  for (int rep = 0; rep < 100; ++rep) {
    const Dims d = random_dims(rng, 3, 9);
    const int max_edge = std::min({d.d, d.h, d.w});
    const int edge = 1 + 2 * static_cast<int>(rng.below((max_edge + 1) / 2));
    const Volume a = random_volume(d, rng), b = random_volume(d, rng);
    ASSERT_NEAR(ssim(a, b, edge), oracle::ssim(a, b, edge, 1.0), 1e-6) << to_string(d) << " " << edge;
  }
  const Dims five{5, 5, 5};
  const Volume a = random_volume(five, rng), b = random_volume(five, rng);
  EXPECT_NEAR(ssim(a, b, 5), oracle::ssim(a, b, 5, 1.0), 1e-6);
}

TEST(Ssim, PropertiesAndErrors) {
  Rng rng(3);
  const Dims d{8, 8, 8};
  Volume t(d, Spacing{}, 0.0f, true);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.bernoulli(0.5) ? 0.95f : 0.05f;
  EXPECT_NEAR(ssim(t, t), 1.0, 1e-12);
  Volume inv = t;
  for (auto& v : inv.raw()) v = 1.0f - v;
  EXPECT_LT(ssim(inv, t), 0.2);
  const Volume p = random_volume(d, rng);
  EXPECT_DOUBLE_EQ(ssim(p, t), ssim(t, p));
  EXPECT_THROW(ssim(p, t, 4), Error);
  EXPECT_THROW(ssim(p, t, 9), Error);
}

TEST(SegmentLumen, ThresholdSemantics) {
  const Dims d{4, 4, 4};
  EXPECT_TRUE(segment_lumen(Volume(d, Spacing{}, 0.0f, true)).empty());
  Volume c(d, Spacing{}, 0.0f, true);
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) c.at(z, y, x) = (z + y + x) % 2 ? 0.6f : 0.4f;
  const VoxelMask m = segment_lumen(c, 0.5f);
  for (std::size_t i = 0; i < c.size(); ++i) ASSERT_EQ(m.bits[i] != 0, c[i] == 0.6f);

  Rng rng(4);
  const Volume v = random_volume(Dims{6, 6, 6}, rng);
  VoxelMask prev = segment_lumen(v, 0.0f);
  for (float t = 0.1f; t <= 1.0f; t += 0.1f) {
    const VoxelMask cur = segment_lumen(v, t);
    for (std::size_t i = 0; i < cur.bits.size(); ++i) ASSERT_LE(cur.bits[i], prev.bits[i]);
    prev = cur;
  }
}

TEST(Dice, Examples) {
  const Dims d{1, 1, 4};
  VoxelMask a(d), b(d);
  EXPECT_EQ(dice(a, b), 1.0);
  a.bits = {1, 1, 0, 0};
  EXPECT_EQ(dice(a, a), 1.0);
  b.bits = {0, 0, 1, 1};
  EXPECT_EQ(dice(a, b), 0.0);
  b.bits = {0, 1, 1, 0};
  EXPECT_EQ(dice(a, b), 0.5);
  Rng rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    const Dims r = random_dims(rng, 1, 9);
    const VoxelMask x = random_mask(r, rng.uniform(), rng), y = random_mask(r, rng.uniform(), rng);
    double inter = 0, nx = 0, ny = 0;
    for (std::size_t i = 0; i < x.bits.size(); ++i) {
      inter += x.bits[i] && y.bits[i];
      nx += x.bits[i];
      ny += y.bits[i];
    }
    ASSERT_NEAR(dice(x, y), 2 * inter / (nx + ny), 1e-12);
    ASSERT_EQ(dice(x, y), dice(y, x));
  }
}

TEST(Hd95, Examples) {
  const Dims d{6, 3, 3};
  VoxelMask a(d), b(d);
  a.bits[(1 * 3 + 1) * 3 + 1] = 1;
  b.bits[(4 * 3 + 1) * 3 + 1] = 1;
  EXPECT_NEAR(hd95(a, b, Spacing{0.5f, 1.0f, 1.0f}), 1.5, 1e-12);
  EXPECT_EQ(hd95(a, a, Spacing{}), 0.0);
  try {
    hd95(VoxelMask(d), b, Spacing{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("first"), std::string::npos);
  }
  try {
    hd95(a, VoxelMask(d), Spacing{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("second"), std::string::npos);
  }
}

TEST(Hd95, MatchesAllPairsOracle) {
  Rng rng(6);
  for (int rep = 0; rep < 100; ++rep) {
    const Dims d = random_dims(rng, 1, 9);
    const Spacing s{float(0.3 + rng.uniform()), float(0.3 + rng.uniform()), float(0.3 + rng.uniform())};
    const VoxelMask a = random_mask(d, rng.uniform(), rng), b = random_mask(d, rng.uniform(), rng);
    const double got = hd95(a, b, s);
    ASSERT_NEAR(got, oracle::hd95(a, b, s), 1e-9);
    ASSERT_EQ(got, hd95(b, a, s));
    ASSERT_GE(got, 0.0);
  }
}

TEST(Hd95, ScalesWithSpacing) {
  Rng rng(7);
  const Dims d{7, 7, 7};
  const VoxelMask a = random_mask(d, 0.3, rng), b = random_mask(d, 0.3, rng);
  const Spacing s{0.5f, 0.75f, 1.0f}, s2{1.0f, 1.5f, 2.0f};
  EXPECT_NEAR(hd95(a, b, s2), 2.0 * hd95(a, b, s), 1e-9);
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_EQ(percentile({3.0, 1.0, 2.0}, 50.0), 2.0);
  EXPECT_NEAR(percentile({0.0, 10.0}, 95.0), 9.5, 1e-12);
  EXPECT_EQ(percentile({4.0}, 95.0), 4.0);
  EXPECT_THROW(percentile({}, 50.0), Error);
}

TEST(Summary, MeanStdMedian) {
  const MetricSummary s = summarize(std::vector<double>{1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_DOUBLE_EQ(s.median, 2.5);
  EXPECT_NEAR(s.stddev, std::sqrt(1.25), 1e-12);
  EXPECT_EQ(s.count, 4u);
  EXPECT_TRUE(std::isnan(summarize(std::vector<double>{}).mean));
}

TEST(EvaluatePairs, IdentityOnCleanInputs) {
  const auto dir = std::filesystem::temp_directory_path() / "densemae_test_metrics";
  std::filesystem::remove_all(dir);
  DatasetSpec spec;
  const Manifest m = build_dataset(2, 10, dir, spec, 3);
  EvalConfig cfg;
  cfg.feed_clean = true;
  const MetricsReport r =
      evaluate_pairs(m, [&](const Volume& hu) { return window_normalize(hu, cfg.window); }, cfg, "identity");
  EXPECT_EQ(r.samples.size(), m.select(SampleRole::kCalcified, Split::kTest).size());
  ASSERT_FALSE(r.samples.empty());
  for (const auto& s : r.samples) {
    EXPECT_TRUE(s.psnr.identical);
    EXPECT_EQ(s.dsc, 1.0);
    ASSERT_TRUE(s.hd95.has_value());
    EXPECT_EQ(*s.hd95, 0.0);
    EXPECT_NEAR(s.ssim, 1.0, 1e-12);
  }
  EXPECT_EQ(r.identical_psnr, r.samples.size());
  const auto j = summary_json(r);
  EXPECT_EQ(j.at("config").at("lumen_threshold"), kDefaultLumenThreshold);
  std::filesystem::remove_all(dir);
}
