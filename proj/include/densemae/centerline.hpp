#pragma once

#include <vector>

#include "densemae/volume.hpp"

namespace densemae {

// Position in millimetres, ordered (z, y, x) like voxel indices.
struct Vec3 {
  double z = 0.0;
  double y = 0.0;
  double x = 0.0;

  Vec3 operator+(const Vec3& o) const { return {z + o.z, y + o.y, x + o.x}; }
  Vec3 operator-(const Vec3& o) const { return {z - o.z, y - o.y, x - o.x}; }
  Vec3 operator*(double s) const { return {z * s, y * s, x * s}; }
  double dot(const Vec3& o) const { return z * o.z + y * o.y + x * o.x; }
  double norm() const;
  bool operator==(const Vec3&) const = default;
};

// Millimetre position of a voxel centre: index * spacing.
inline Vec3 voxel_position(int z, int y, int x, const Spacing& s) {
  return {z * static_cast<double>(s.z), y * static_cast<double>(s.y), x * static_cast<double>(s.x)};
}

// Ordered polyline with a lumen radius per point. Coordinates are in the
// millimetre frame of the volume it belongs to (voxel (0,0,0) at the origin).
struct Centerline {
  std::vector<Vec3> points;
  std::vector<double> radii;

  // >= 2 points, consecutive points distinct, radii positive.
  void validate() const;
  double length() const;
  // Cumulative arc length at each point (first entry 0).
  std::vector<double> arc_lengths() const;
  double max_radius() const;
  // Point and radius at arc length s, linearly interpolated along segments.
  Vec3 point_at(double s) const;
  double radius_at(double s) const;
};

struct ClosestPoint {
  double distance = 0.0;    // mm
  double arc_length = 0.0;  // of the foot point
  double radius = 0.0;      // interpolated at the foot point
};

ClosestPoint closest_point(const Centerline& cl, const Vec3& p);

}  // namespace densemae
