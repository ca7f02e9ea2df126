#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "densemae/errors.hpp"
#include "densemae/phantom.hpp"

using namespace densemae;

namespace {

PhantomSpec quiet_tube_spec() {
  PhantomSpec s;
  s.dims = {40, 24, 24};
  s.spacing = {0.5f, 0.5f, 0.5f};
  s.background_sigma_hu = 0.0f;
  s.curvature = 0.0;
  s.radius_min_mm = s.radius_max_mm = 1.5;
  return s;
}

double face_distance(const Vec3& p, const PhantomSpec& s) {
  const double ez = (s.dims.d - 1) * s.spacing.z, ey = (s.dims.h - 1) * s.spacing.y,
               ex = (s.dims.w - 1) * s.spacing.x;
  return std::min({p.z, ez - p.z, p.y, ey - p.y, p.x, ex - p.x});
}

}  // namespace

TEST(PhantomSpec, Validation) {
  PhantomSpec s;
  EXPECT_NO_THROW(s.validate());
  s.radius_min_mm = 0;
  EXPECT_THROW(s.validate(), Error);
  s = PhantomSpec{};
  s.radius_max_mm = 1.0;
  EXPECT_THROW(s.validate(), Error);
  s = PhantomSpec{};
  s.background_sigma_hu = -1;
  EXPECT_THROW(s.validate(), Error);
  CalciumSpec c;
  EXPECT_NO_THROW(c.validate());
  c.peak_hu = 400;
  EXPECT_THROW(c.validate(), Error);
  c = CalciumSpec{};
  c.blur_sigma_mm = -0.1;
  EXPECT_THROW(c.validate(), Error);
  c = CalciumSpec{};
  c.overshoot = 0.5;
  EXPECT_THROW(c.validate(), Error);
}

TEST(GenerateCenterline, ZeroCurvatureIsStraightCenteredAlongLongestAxis) {
  PhantomSpec s = quiet_tube_spec();
  s.dims = {20, 36, 20};
  Rng rng(4);
  const Centerline cl = generate_centerline(s, rng);
  const double cz = (s.dims.d - 1) * s.spacing.z / 2, cx = (s.dims.w - 1) * s.spacing.x / 2;
  for (const auto& p : cl.points) {
    EXPECT_NEAR(p.z, cz, 1e-9);
    EXPECT_NEAR(p.x, cx, 1e-9);
  }
  EXPECT_GT(cl.points.back().y - cl.points.front().y, 10.0);
}

TEST(GenerateCenterline, Deterministic) {
  const PhantomSpec s;
  Rng a(17), b(17), c(18);
  const Centerline ca = generate_centerline(s, a), cb = generate_centerline(s, b),
                   cc = generate_centerline(s, c);
  EXPECT_EQ(ca.points, cb.points);
  EXPECT_EQ(ca.radii, cb.radii);
  EXPECT_NE(ca.points, cc.points);
}

TEST(GenerateCenterline, KeepsMaxRadiusFromEveryFace) {
  PhantomSpec s;
  s.curvature = 1.0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(seed);
    const Centerline cl = generate_centerline(s, rng);
    ASSERT_NO_THROW(cl.validate());
    for (std::size_t i = 0; i < cl.points.size(); ++i) {
      ASSERT_GE(face_distance(cl.points[i], s), s.radius_max_mm - 1e-9) << "seed " << seed;
      ASSERT_GE(cl.radii[i], s.radius_min_mm);
      ASSERT_LE(cl.radii[i], s.radius_max_mm);
    }
  }
}

TEST(GenerateCenterline, RejectsTooSmallDims) {
  PhantomSpec s;
  s.dims = {80, 6, 40};
  Rng rng(1);
  EXPECT_THROW(generate_centerline(s, rng), Error);
}

TEST(RasterizeVessel, StraightTubeHasIdenticalCrossSections) {
  const PhantomSpec s = quiet_tube_spec();
  Rng rng(2);
  const Centerline cl = generate_centerline(s, rng);
  const Volume v = rasterize_vessel(cl, s, rng);
  // Axial slices away from the capped ends.
  for (int z = 10; z < 30; ++z)
    for (int y = 0; y < s.dims.h; ++y)
      for (int x = 0; x < s.dims.w; ++x) ASSERT_FLOAT_EQ(v.at(z, y, x), v.at(20, y, x));
}

TEST(RasterizeVessel, CenterlineVoxelIsLumen) {
  PhantomSpec s = quiet_tube_spec();
  s.dims = {41, 25, 25};
  Rng rng(3);
  const Centerline cl = generate_centerline(s, rng);
  const Volume v = rasterize_vessel(cl, s, rng);
  EXPECT_FLOAT_EQ(v.at(20, 12, 12), s.lumen_hu);
  EXPECT_FLOAT_EQ(v.at(20, 0, 0), s.background_mean_hu);
}

TEST(RasterizeVessel, LumenVolumeMatchesCylinder) {
  // Radius 2 mm at 0.5 mm spacing = 4 voxels.
  PhantomSpec s = quiet_tube_spec();
  s.radius_min_mm = s.radius_max_mm = 2.0;
  s.dims = {60, 30, 30};
  Rng rng(5);
  const Centerline cl = generate_centerline(s, rng);
  const Volume v = rasterize_vessel(cl, s, rng);
  double lumen = 0;  // partial-volume weighted
  for (float x : v.raw()) {
    if (x > s.wall_hu) lumen += (x - s.wall_hu) / (s.lumen_hu - s.wall_hu);
  }
  const double voxel_mm3 = 0.125;
  const double cylinder = M_PI * 4.0 * cl.length() + 4.0 / 3.0 * M_PI * 8.0;  // capsule
  EXPECT_NEAR(lumen * voxel_mm3 / cylinder, 1.0, 0.15);
}

TEST(RasterizeVessel, HealthyDefaultsStayBelowCalciumThreshold) {
  const PhantomSpec s;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const Volume v = rasterize_vessel(generate_centerline(s, rng), s, rng);
    EXPECT_TRUE(threshold_mask(v, kDefaultCalciumThresholdHu).empty());
    EXPECT_LE(*std::max_element(v.raw().begin(), v.raw().end()), s.lumen_hu + 1e-3);
  }
}

TEST(InjectCalcification, PeakCoreAndDifferenceSupport) {
  const PhantomSpec s;
  Rng rng(8);
  const Centerline cl = generate_centerline(s, rng);
  const Volume clean = rasterize_vessel(cl, s, rng);
  CalciumSpec c;
  c.placement_mm = cl.length() / 2;
  const CalcifiedVolume cv = inject_calcification(clean, cl, c, rng);
  EXPECT_EQ(cv.clean.raw(), clean.raw());
  EXPECT_GE(*std::max_element(cv.corrupted.raw().begin(), cv.corrupted.raw().end()), 0.9f * c.peak_hu);
  ASSERT_FALSE(cv.calcium_region.empty());

  // Ball dilated by the truncated separable kernel (a box of ceil(3 sigma / s) voxels).
  const double support = c.plaque_radius_mm + std::ceil(3 * c.blur_sigma_mm / s.spacing.z) * s.spacing.z;
  for (int z = 0; z < s.dims.d; ++z)
    for (int y = 0; y < s.dims.h; ++y)
      for (int x = 0; x < s.dims.w; ++x) {
        const std::size_t i = clean.index(z, y, x);
        const Vec3 d = voxel_position(z, y, x, s.spacing) - cv.plaque_center;
        if (d.norm() <= c.plaque_radius_mm) {
          ASSERT_TRUE(cv.calcium_region.bits[i]) << "core voxel not calcified";
        }
        if (cv.corrupted[i] != clean[i]) {
          ASSERT_LE(std::max({std::abs(d.z), std::abs(d.y), std::abs(d.x)}), support + 1e-6);
        }
        if (cv.calcium_region.bits[i]) {
          ASSERT_NE(cv.corrupted[i], clean[i]);
        }
      }
}

TEST(InjectCalcification, LargerOvershootGrowsRegion) {
  const PhantomSpec s;
  Rng base(21);
  const Centerline cl = generate_centerline(s, base);
  const Volume clean = rasterize_vessel(cl, s, base);
  CalciumSpec c;
  c.placement_mm = cl.length() * 0.4;
  c.overshoot = 1.0;
  Rng r1(5), r2(5);
  const auto one = inject_calcification(clean, cl, c, r1);
  c.overshoot = 2.0;
  const auto two = inject_calcification(clean, cl, c, r2);
  EXPECT_GE(two.calcium_region.count(), one.calcium_region.count());
  EXPECT_GT(two.calcium_region.count(), 0u);
}

TEST(InjectCalcification, NoBlurKeepsBallOnly) {
  const PhantomSpec s;
  Rng rng(9);
  const Centerline cl = generate_centerline(s, rng);
  const Volume clean = rasterize_vessel(cl, s, rng);
  CalciumSpec c;
  c.blur_sigma_mm = 0.0;
  c.placement_mm = 5.0;
  const auto cv = inject_calcification(clean, cl, c, rng);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (cv.corrupted[i] != clean[i]) {
      ASSERT_EQ(cv.corrupted[i], c.peak_hu);
    }
  }
}

TEST(InjectCalcification, RejectsPlacementBeyondLength) {
  const PhantomSpec s;
  Rng rng(1);
  const Centerline cl = generate_centerline(s, rng);
  const Volume clean = rasterize_vessel(cl, s, rng);
  CalciumSpec c;
  c.placement_mm = cl.length() + 1;
  EXPECT_THROW(inject_calcification(clean, cl, c, rng), Error);
  c.placement_mm = -0.5;
  EXPECT_THROW(inject_calcification(clean, cl, c, rng), Error);
}

TEST(PhantomJson, RoundTrips) {
  PhantomSpec s;
  s.curvature = 0.25;
  s.dims = {64, 32, 48};
  const PhantomSpec r = phantom_spec_from_json(to_json(s));
  EXPECT_EQ(r.dims, s.dims);
  EXPECT_EQ(r.curvature, s.curvature);
  CalciumSpec c;
  c.overshoot = 1.75;
  EXPECT_EQ(calcium_spec_from_json(to_json(c)).overshoot, 1.75);
  Rng rng(2);
  const Centerline cl = generate_centerline(s, rng);
  const Centerline back = centerline_from_json(to_json(cl));
  EXPECT_EQ(back.points, cl.points);
  EXPECT_EQ(back.radii, cl.radii);
  EXPECT_THROW(centerline_from_json(nlohmann::json{{"points_mm", 3}}), Error);
}
