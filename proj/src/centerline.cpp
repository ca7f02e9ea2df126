#include "densemae/centerline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "densemae/errors.hpp"

namespace densemae {

double Vec3::norm() const { return std::sqrt(dot(*this)); }

void Centerline::validate() const {
  if (points.size() < 2) throw invalid_argument("centerline needs at least 2 points");
  if (radii.size() != points.size()) {
    throw invalid_argument("centerline has " + std::to_string(points.size()) + " points but " +
                           std::to_string(radii.size()) + " radii");
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!(radii[i] > 0.0)) throw invalid_argument("centerline radius " + std::to_string(i) + " is not positive");
    if (i > 0 && points[i] == points[i - 1]) {
      throw invalid_argument("centerline points " + std::to_string(i - 1) + " and " +
                             std::to_string(i) + " coincide");
    }
  }
}

std::vector<double> Centerline::arc_lengths() const {
  std::vector<double> s(points.size(), 0.0);
  for (std::size_t i = 1; i < points.size(); ++i) s[i] = s[i - 1] + (points[i] - points[i - 1]).norm();
  return s;
}

double Centerline::length() const { return points.empty() ? 0.0 : arc_lengths().back(); }

double Centerline::max_radius() const {
  return radii.empty() ? 0.0 : *std::max_element(radii.begin(), radii.end());
}

namespace {
// Segment index and fraction for arc length s (clamped to the curve).
std::pair<std::size_t, double> locate(const std::vector<double>& s, double at) {
  if (at <= 0.0) return {0, 0.0};
  for (std::size_t i = 1; i < s.size(); ++i) {
    if (at <= s[i]) return {i - 1, (at - s[i - 1]) / (s[i] - s[i - 1])};
  }
  return {s.size() - 2, 1.0};
}
}  // namespace

Vec3 Centerline::point_at(double at) const {
  const auto [i, f] = locate(arc_lengths(), at);
  return points[i] + (points[i + 1] - points[i]) * f;
}

double Centerline::radius_at(double at) const {
  const auto [i, f] = locate(arc_lengths(), at);
  return radii[i] + (radii[i + 1] - radii[i]) * f;
}

ClosestPoint closest_point(const Centerline& cl, const Vec3& p) {
  ClosestPoint best;
  best.distance = std::numeric_limits<double>::infinity();
  double s0 = 0.0;
  for (std::size_t i = 0; i + 1 < cl.points.size(); ++i) {
    const Vec3 a = cl.points[i];
    const Vec3 ab = cl.points[i + 1] - a;
    const double len2 = ab.dot(ab);
    const double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    const double dist = (p - (a + ab * t)).norm();
    const double len = std::sqrt(len2);
    if (dist < best.distance) {
      best.distance = dist;
      best.arc_length = s0 + t * len;
      best.radius = cl.radii[i] + (cl.radii[i + 1] - cl.radii[i]) * t;
    }
    s0 += len;
  }
  return best;
}

}  // namespace densemae
