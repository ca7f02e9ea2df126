#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "densemae/errors.hpp"
#include "densemae/rng.hpp"
#include "densemae/spline.hpp"
#include "densemae/volume.hpp"

using namespace densemae;

namespace {

Volume random_volume(Dims dims, Spacing sp, std::uint64_t seed, double lo = -1000, double hi = 2000) {
  Rng rng(seed);
  Volume v(dims, sp);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(rng.uniform(lo, hi));
  return v;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("densemae_volume_" + name);
}

}  // namespace

TEST(Volume, RejectsBadGeometry) {
  EXPECT_THROW(Volume(Dims{0, 2, 2}, Spacing{}), Error);
  EXPECT_THROW(Volume(Dims{2, 2, 2}, Spacing{1, 0, 1}), Error);
  EXPECT_THROW(Volume(Dims{2, 2, 2}, Spacing{}, std::vector<float>(7)), Error);
  EXPECT_THROW(Volume(Dims{1, 1, 2}, Spacing{}, std::vector<float>{0.5f, 1.5f}, true), Error);
}

TEST(WindowNormalize, BoundaryValues) {
  const WindowSpec w{-1024, 3071};
  Volume v(Dims{1, 1, 4}, Spacing{}, std::vector<float>{-1024, 3071, (-1024 + 3071) / 2.0f, 3571});
  const Volume n = window_normalize(v, w);
  EXPECT_TRUE(n.normalized());
  EXPECT_EQ(n[0], 0.0f);
  EXPECT_EQ(n[1], 1.0f);
  EXPECT_NEAR(n[2], 0.5f, 1e-7);
  EXPECT_EQ(n[3], 1.0f);
  EXPECT_THROW(window_normalize(v, WindowSpec{10, 10}), Error);
  EXPECT_THROW(window_normalize(v, WindowSpec{20, 10}), Error);
}

TEST(WindowNormalize, MonotoneAndIdempotentThroughInverse) {
  const WindowSpec w{-200, 800};
  Volume v(Dims{1, 1, 2001}, Spacing{});
  for (int i = 0; i < 2001; ++i) v[i] = -500.0f + i * 0.75f;
  const Volume n = window_normalize(v, w);
  for (int i = 1; i < 2001; ++i) EXPECT_LE(n[i - 1], n[i]);
  Volume back(v.dims(), v.spacing());
  for (std::size_t i = 0; i < n.size(); ++i) back[i] = w.to_hu(n[i]);
  const Volume again = window_normalize(back, w);
  for (std::size_t i = 0; i < n.size(); ++i) EXPECT_NEAR(again[i], n[i], 1e-6);
}

TEST(ExtractPatch, ConstantVolume) {
  Volume v(Dims{10, 12, 9}, Spacing{}, 0.3f, true);
  const Patch p = extract_patch(v, Index3{5, 6, 4}, 8);
  EXPECT_EQ(p.values.dims(), (Dims{8, 8, 8}));
  for (float x : p.values.raw()) EXPECT_EQ(x, 0.3f);
  EXPECT_TRUE(p.values.normalized());
}

TEST(ExtractPatch, CornerMatchesClampedIndexOracle) {
  const Volume v = random_volume(Dims{6, 7, 5}, Spacing{0.5f, 1, 2}, 3);
  for (const Index3 c : {Index3{0, 0, 0}, Index3{5, 6, 4}, Index3{0, 6, 2}, Index3{3, 3, 2}}) {
    const int P = 8;
    const Patch p = extract_patch(v, c, P);
    EXPECT_EQ(p.origin, (Index3{c.z - P / 2, c.y - P / 2, c.x - P / 2}));
    for (int z = 0; z < P; ++z)
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x) {
          const int sz = std::clamp(p.origin.z + z, 0, 5);
          const int sy = std::clamp(p.origin.y + y, 0, 6);
          const int sx = std::clamp(p.origin.x + x, 0, 4);
          ASSERT_EQ(p.values.at(z, y, x), v.at(sz, sy, sx));
        }
  }
}

TEST(ExtractPatch, RejectsOutOfBoundsCenterAndBadEdge) {
  const Volume v(Dims{4, 4, 4}, Spacing{});
  EXPECT_THROW(extract_patch(v, Index3{4, 0, 0}, 2), Error);
  EXPECT_THROW(extract_patch(v, Index3{0, -1, 0}, 2), Error);
  EXPECT_THROW(extract_patch(v, Index3{1, 1, 1}, 0), Error);
}

TEST(ExtractPatch, WriteBackIsIdentityOnCoveredRegion) {
  const Volume v = random_volume(Dims{12, 12, 12}, Spacing{}, 9);
  Volume copy = v;
  const Patch p = extract_patch(v, Index3{6, 5, 7}, 6);
  Volume zeroed(v.dims(), v.spacing());
  write_patch(zeroed, p);
  write_patch(copy, p);
  EXPECT_EQ(copy.raw(), v.raw());
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x)
        EXPECT_EQ(zeroed.at(p.origin.z + z, p.origin.y + y, p.origin.x + x),
                  v.at(p.origin.z + z, p.origin.y + y, p.origin.x + x));
}

TEST(VolumeFile, RoundTripIsBitExact) {
  const Volume v = random_volume(Dims{3, 5, 7}, Spacing{0.47f, 0.5f, 1.25f}, 11);
  const auto path = temp_path("roundtrip.vxma");
  save_volume(v, path);
  const Volume r = load_volume(path);
  EXPECT_EQ(r.dims(), v.dims());
  EXPECT_EQ(r.spacing(), v.spacing());
  EXPECT_EQ(r.normalized(), v.normalized());
  ASSERT_EQ(r.size(), v.size());
  EXPECT_EQ(std::memcmp(r.raw().data(), v.raw().data(), v.size() * sizeof(float)), 0);

  const Volume n = window_normalize(v, WindowSpec{});
  const Volume rn = decode_volume(encode_volume(n));
  EXPECT_TRUE(rn.normalized());
  EXPECT_EQ(rn.raw(), n.raw());
  std::filesystem::remove(path);
}

TEST(VolumeFile, HeaderLayout) {
  const Volume v(Dims{1, 2, 3}, Spacing{0.5f, 0.25f, 2.0f}, 0.5f, true);
  const auto bytes = encode_volume(v);
  ASSERT_EQ(bytes.size(), 4u + 2 + 2 + 12 + 12 + 6 * 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "VXMA");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 1);  // normalized flag
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 2);
  EXPECT_EQ(bytes[16], 3);
}

TEST(VolumeFile, CorruptInputsRaiseParseErrors) {
  const Volume v(Dims{2, 2, 2}, Spacing{}, 1.0f);
  auto bytes = encode_volume(v);
  auto expect_parse = [](std::vector<std::uint8_t> b, const std::string& needle) {
    try {
      decode_volume(b);
      FAIL() << "expected parse error";
    } catch (const Error& e) {
      EXPECT_EQ(e.category(), ErrorCategory::kParse);
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_parse(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 10), "dims");
  expect_parse(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 2), "magic");
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  expect_parse(bad_magic, "magic");
  auto short_payload = bytes;
  short_payload.resize(short_payload.size() - 4);
  expect_parse(short_payload, "payload");
  auto bad_version = bytes;
  bad_version[4] = 9;
  expect_parse(bad_version, "version");
}

TEST(VolumeFile, MissingFileIsIoError) {
  try {
    load_volume(temp_path("does_not_exist.vxma"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kIo);
    EXPECT_NE(std::string(e.what()).find("does_not_exist"), std::string::npos);
  }
}

TEST(NaturalCubicSpline, ReproducesLinesAndInterpolatesKnots) {
  const NaturalCubicSpline line({0, 1, 3, 4.5}, {1, 3, 7, 10});
  for (double t = -1; t <= 6; t += 0.25) EXPECT_NEAR(line(t), 1 + 2 * t, 1e-12);
  const NaturalCubicSpline s({0, 1, 2, 3}, {0, 1, 0, 1});
  EXPECT_NEAR(s(0), 0, 1e-12);
  EXPECT_NEAR(s(1), 1, 1e-12);
  EXPECT_NEAR(s(2), 0, 1e-12);
  EXPECT_NEAR(s(3), 1, 1e-12);
  // C1 continuity at an interior knot.
  EXPECT_NEAR(s.derivative(1 - 1e-9), s.derivative(1 + 1e-9), 1e-6);
  EXPECT_THROW(NaturalCubicSpline({0, 0, 1}, {1, 2, 3}), Error);
  EXPECT_THROW(NaturalCubicSpline({0}, {1}), Error);
}
