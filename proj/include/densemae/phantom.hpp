#pragma once

#include <cstdint>

#include "densemae/centerline.hpp"
#include "densemae/rng.hpp"
#include "densemae/volume.hpp"
#include "json.hpp"

namespace densemae {

// HU level at or above which a voxel counts as calcium.
inline constexpr float kDefaultCalciumThresholdHu = 500.0f;

struct PhantomSpec {
  Dims dims{80, 40, 40};
  Spacing spacing{0.47f, 0.47f, 0.47f};
  float lumen_hu = 350.0f;
  float wall_hu = 60.0f;
  float background_mean_hu = 40.0f;
  float background_sigma_hu = 20.0f;
  double wall_thickness_mm = 0.5;
  // Fraction of the free room across the vessel axis used by control-point offsets.
  double curvature = 0.5;
  double radius_min_mm = 1.2;
  double radius_max_mm = 2.0;
  int control_points_min = 4;
  int control_points_max = 8;
  // Randomly permute the volume axes per sample so vessels run along z, y or x.
  bool random_axis = true;

  void validate() const;
};

struct CalciumSpec {
  float peak_hu = 900.0f;
  double plaque_radius_mm = 1.0;
  double blur_sigma_mm = 0.6;
  double overshoot = 1.5;
  double placement_mm = 0.0;  // arc length of the plaque centre along the centerline
  // Plaque centre offset from the centerline, in units of the local lumen radius.
  double wall_offset = 1.0;
  float threshold_hu = kDefaultCalciumThresholdHu;

  void validate() const;
};

// Smooth centerline along the longest axis of spec.dims (spline through
// jittered control points); every point keeps max radius + wall from all faces.
Centerline generate_centerline(const PhantomSpec& spec, Rng& rng);

// Lumen / wall / noisy background rendering in HU. The lumen edge is blended
// linearly over one voxel; noise is drawn for every voxel in raster order.
Volume rasterize_vessel(const Centerline& cl, const PhantomSpec& spec, Rng& rng);

struct CalcifiedVolume {
  Volume corrupted;
  VoxelMask calcium_region;  // corrupted >= threshold
  Volume clean;
  Vec3 plaque_center;        // mm, volume frame
};

// Adds a blurred, over-scaled plaque blob: b = blur(ball) / max, and
// corrupted = clean + (peak - clean) * min(1, overshoot * b).
CalcifiedVolume inject_calcification(const Volume& vol, const Centerline& cl,
                                     const CalciumSpec& spec, Rng& rng);

// Voxels at or above `threshold_hu`.
VoxelMask threshold_mask(const Volume& vol, float threshold_hu);

nlohmann::json to_json(const PhantomSpec& spec);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CalciumSpec& spec);
CalciumSpec calcium_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Centerline& cl);
Centerline centerline_from_json(const nlohmann::json& j);

}  // namespace densemae
