#include "densemae/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "densemae/errors.hpp"
#include "densemae/spline.hpp"

namespace densemae {

void PhantomSpec::validate() const {
  if (dims.d < 1 || dims.h < 1 || dims.w < 1) throw invalid_argument("phantom dims must be positive");
  if (!(spacing.z > 0 && spacing.y > 0 && spacing.x > 0)) {
    throw invalid_argument("phantom spacing must be positive");
  }
  if (!(radius_min_mm > 0.0) || radius_max_mm < radius_min_mm) {
    throw invalid_argument("phantom radius range must satisfy 0 < min <= max");
  }
  if (!(background_sigma_hu >= 0.0f)) throw invalid_argument("background sigma must be >= 0");
  if (!(wall_thickness_mm >= 0.0)) throw invalid_argument("wall thickness must be >= 0");
  if (!(curvature >= 0.0 && curvature <= 1.0)) throw invalid_argument("curvature must lie in [0, 1]");
  if (control_points_min < 2 || control_points_max < control_points_min) {
    throw invalid_argument("control point range must satisfy 2 <= min <= max");
  }
}

void CalciumSpec::validate() const {
  if (!(peak_hu > threshold_hu)) {
    throw invalid_argument("plaque peak " + std::to_string(peak_hu) +
                           " HU must exceed the calcium threshold " + std::to_string(threshold_hu));
  }
  if (!(plaque_radius_mm > 0.0)) throw invalid_argument("plaque radius must be positive");
  if (!(blur_sigma_mm >= 0.0)) throw invalid_argument("blur sigma must be >= 0");
  if (!(overshoot >= 1.0)) throw invalid_argument("overshoot factor must be >= 1");
  if (!(wall_offset >= 0.0)) throw invalid_argument("wall offset must be >= 0");
}

namespace {

std::array<double, 3> extents_mm(const Dims& d, const Spacing& s) {
  return {(d.d - 1) * static_cast<double>(s.z), (d.h - 1) * static_cast<double>(s.y),
          (d.w - 1) * static_cast<double>(s.x)};
}

double& axis_ref(Vec3& v, int a) { return a == 0 ? v.z : a == 1 ? v.y : v.x; }

double mean_spacing(const Spacing& s) { return (s.z + s.y + s.x) / 3.0; }

}  // namespace

Centerline generate_centerline(const PhantomSpec& spec, Rng& rng) {
  spec.validate();
  const auto ext = extents_mm(spec.dims, spec.spacing);
  const double margin = spec.radius_max_mm + spec.wall_thickness_mm;
  for (int a = 0; a < 3; ++a) {
    if (ext[a] < 2.0 * margin + 1e-9) {
      throw invalid_argument("phantom dims " + to_string(spec.dims) +
                             " are too small for a vessel of radius " +
                             std::to_string(spec.radius_max_mm) + " mm plus wall");
    }
  }
  const int along = static_cast<int>(std::max_element(ext.begin(), ext.end()) - ext.begin());
  const int across[2] = {(along + 1) % 3, (along + 2) % 3};
  const double span = ext[along] - 2.0 * margin;
  if (!(span > 0.0)) throw invalid_argument("phantom long axis leaves no room for the vessel");

  const int n_ctrl = spec.control_points_min +
                     static_cast<int>(rng.below(spec.control_points_max - spec.control_points_min + 1));
  std::vector<double> u(n_ctrl), off[2], rad(n_ctrl);
  const double step = span / (n_ctrl - 1);
  for (int j = 0; j < n_ctrl; ++j) {
    const double jitter = (j == 0 || j == n_ctrl - 1) ? 0.0 : rng.uniform(-0.25, 0.25) * step;
    u[j] = margin + j * step + jitter;
  }
  for (int k = 0; k < 2; ++k) {
    off[k].resize(n_ctrl);
    const double room = ext[across[k]] / 2.0 - margin;
    for (int j = 0; j < n_ctrl; ++j) off[k][j] = spec.curvature * room * rng.uniform(-0.8, 0.8);
  }
  for (int j = 0; j < n_ctrl; ++j) rad[j] = rng.uniform(spec.radius_min_mm, spec.radius_max_mm);

  const NaturalCubicSpline radius_curve(u, rad);
  const int dims_along = along == 0 ? spec.dims.d : along == 1 ? spec.dims.h : spec.dims.w;
  const int n_samples = std::max(16, 2 * dims_along);

  // Shrink the offsets until the sampled curve clears every face; zero offsets
  // (a straight centered line) always do.
  double shrink = 1.0;
  for (int attempt = 0;; ++attempt) {
    std::vector<double> ok[2];
    for (int k = 0; k < 2; ++k) {
      ok[k] = off[k];
      for (auto& o : ok[k]) o *= shrink;
    }
    const NaturalCubicSpline c0(u, ok[0]), c1(u, ok[1]);
    Centerline cl;
    bool inside = true;
    for (int i = 0; i < n_samples; ++i) {
      const double t = u.front() + (u.back() - u.front()) * i / (n_samples - 1);
      Vec3 p;
      axis_ref(p, along) = t;
      axis_ref(p, across[0]) = ext[across[0]] / 2.0 + c0(t);
      axis_ref(p, across[1]) = ext[across[1]] / 2.0 + c1(t);
      for (int k = 0; k < 2; ++k) {
        const double v = axis_ref(p, across[k]);
        if (v < margin - 1e-9 || v > ext[across[k]] - margin + 1e-9) inside = false;
      }
      cl.points.push_back(p);
      cl.radii.push_back(std::clamp(radius_curve(t), spec.radius_min_mm, spec.radius_max_mm));
    }
    if (inside || attempt >= 40) {
      if (!inside) {
        for (auto& p : cl.points)
          for (int k = 0; k < 2; ++k) axis_ref(p, across[k]) = ext[across[k]] / 2.0;
      }
      cl.validate();
      return cl;
    }
    shrink *= 0.7;
  }
}

Volume rasterize_vessel(const Centerline& cl, const PhantomSpec& spec, Rng& rng) {
  spec.validate();
  cl.validate();
  const Dims dims = spec.dims;
  const Spacing sp = spec.spacing;
  Volume vol(dims, sp, 0.0f);
  std::vector<float>& out = vol.raw();
  for (auto& v : out) {
    v = static_cast<float>(spec.background_mean_hu + spec.background_sigma_hu * rng.normal());
  }

  // Distance to the polyline (union of capsules), voxels near some segment only.
  const double reach = cl.max_radius() + spec.wall_thickness_mm + 2.0 * mean_spacing(sp);
  std::vector<double> dist(dims.voxels(), std::numeric_limits<double>::infinity());
  std::vector<double> radius(dims.voxels(), 0.0);
  for (std::size_t s = 0; s + 1 < cl.points.size(); ++s) {
    const Vec3 a = cl.points[s], b = cl.points[s + 1];
    const Vec3 ab = b - a;
    const double len2 = ab.dot(ab);
    auto lo_hi = [&](double pa, double pb, float spacing, int n) {
      const int lo = std::max(0, static_cast<int>(std::floor((std::min(pa, pb) - reach) / spacing)));
      const int hi = std::min(n - 1, static_cast<int>(std::ceil((std::max(pa, pb) + reach) / spacing)));
      return std::pair<int, int>{lo, hi};
    };
    const auto [z0, z1] = lo_hi(a.z, b.z, sp.z, dims.d);
    const auto [y0, y1] = lo_hi(a.y, b.y, sp.y, dims.h);
    const auto [x0, x1] = lo_hi(a.x, b.x, sp.x, dims.w);
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const Vec3 p = voxel_position(z, y, x, sp);
          const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
          const double d = (p - (a + ab * t)).norm();
          const std::size_t i = vol.index(z, y, x);
          if (d < dist[i]) {
            dist[i] = d;
            radius[i] = cl.radii[s] + (cl.radii[s + 1] - cl.radii[s]) * t;
          }
        }
  }

  const double voxel = mean_spacing(sp);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = dist[i];
    if (!std::isfinite(d)) continue;
    const double r = radius[i];
    const double outer = d <= r + spec.wall_thickness_mm ? spec.wall_hu : out[i];
    const double f = std::clamp((r - d) / voxel + 0.5, 0.0, 1.0);
    out[i] = static_cast<float>(f * spec.lumen_hu + (1.0 - f) * outer);
  }
  return vol;
}

VoxelMask threshold_mask(const Volume& vol, float threshold_hu) {
  VoxelMask m(vol.dims());
  for (std::size_t i = 0; i < vol.size(); ++i) m.bits[i] = vol[i] >= threshold_hu ? 1 : 0;
  return m;
}

namespace {

// 1D truncated Gaussian kernel (radius ceil(3 sigma / spacing) voxels).
std::vector<double> gaussian_kernel(double sigma_mm, double spacing_mm) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma_mm / spacing_mm));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    const double x = i * spacing_mm;
    k[i + r] = std::exp(-x * x / (2.0 * sigma_mm * sigma_mm));
    sum += k[i + r];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable convolution of a zero-bordered box along one axis.
void blur_axis(std::vector<double>& box, const std::array<int, 3>& n, int axis,
               const std::vector<double>& kernel) {
  const int r = static_cast<int>(kernel.size() / 2);
  std::vector<double> out(box.size(), 0.0);
  const std::array<std::size_t, 3> stride = {static_cast<std::size_t>(n[1]) * n[2],
                                             static_cast<std::size_t>(n[2]), 1};
  for (int z = 0; z < n[0]; ++z)
    for (int y = 0; y < n[1]; ++y)
      for (int x = 0; x < n[2]; ++x) {
        const int c[3] = {z, y, x};
        const std::size_t i = z * stride[0] + y * stride[1] + x;
        double acc = 0.0;
        for (int k = -r; k <= r; ++k) {
          const int q = c[axis] + k;
          if (q < 0 || q >= n[axis]) continue;
          acc += kernel[k + r] * box[i + static_cast<long>(k) * static_cast<long>(stride[axis])];
        }
        out[i] = acc;
      }
  box.swap(out);
}

}  // namespace

CalcifiedVolume inject_calcification(const Volume& vol, const Centerline& cl,
                                     const CalciumSpec& spec, Rng& rng) {
  spec.validate();
  cl.validate();
  const double length = cl.length();
  if (spec.placement_mm < 0.0 || spec.placement_mm > length) {
    throw invalid_argument("plaque placement " + std::to_string(spec.placement_mm) +
                           " mm lies outside the centerline length " + std::to_string(length) + " mm");
  }
  const Spacing sp = vol.spacing();
  const Dims dims = vol.dims();

  // Plaque centre: on the lumen boundary in a random direction across the vessel.
  const double s = spec.placement_mm;
  const double ds = std::min(0.5, length / 4.0);
  Vec3 tangent = cl.point_at(std::min(length, s + ds)) - cl.point_at(std::max(0.0, s - ds));
  tangent = tangent * (1.0 / tangent.norm());
  Vec3 normal;
  for (;;) {
    Vec3 g{rng.normal(), rng.normal(), rng.normal()};
    g = g - tangent * g.dot(tangent);
    const double n = g.norm();
    if (n > 1e-6) {
      normal = g * (1.0 / n);
      break;
    }
  }
  const Vec3 center = cl.point_at(s) + normal * (spec.wall_offset * cl.radius_at(s));

  // Local box holding the ball plus the blur support.
  const double reach = spec.plaque_radius_mm + 3.0 * spec.blur_sigma_mm;
  const float spc[3] = {sp.z, sp.y, sp.x};
  const double cc[3] = {center.z, center.y, center.x};
  const int nd[3] = {dims.d, dims.h, dims.w};
  std::array<int, 3> lo{}, n{};
  for (int a = 0; a < 3; ++a) {
    const int l = std::max(0, static_cast<int>(std::floor((cc[a] - reach) / spc[a])) - 1);
    const int h = std::min(nd[a] - 1, static_cast<int>(std::ceil((cc[a] + reach) / spc[a])) + 1);
    lo[a] = l;
    n[a] = std::max(0, h - l + 1);
  }
  std::vector<double> box(static_cast<std::size_t>(n[0]) * n[1] * n[2], 0.0);
  auto box_index = [&](int z, int y, int x) {
    return (static_cast<std::size_t>(z) * n[1] + y) * n[2] + x;
  };
  bool any = false;
  for (int z = 0; z < n[0]; ++z)
    for (int y = 0; y < n[1]; ++y)
      for (int x = 0; x < n[2]; ++x) {
        const Vec3 p = voxel_position(lo[0] + z, lo[1] + y, lo[2] + x, sp);
        if ((p - center).norm() <= spec.plaque_radius_mm) {
          box[box_index(z, y, x)] = 1.0;
          any = true;
        }
      }
  if (!any && !box.empty()) {
    // Ball thinner than the grid: keep the voxel nearest its centre.
    int q[3];
    for (int a = 0; a < 3; ++a) q[a] = std::clamp(static_cast<int>(std::lround(cc[a] / spc[a])) - lo[a], 0, n[a] - 1);
    box[box_index(q[0], q[1], q[2])] = 1.0;
  }
  std::vector<std::uint8_t> core(box.size());
  for (std::size_t i = 0; i < box.size(); ++i) core[i] = box[i] > 0.0;
  if (spec.blur_sigma_mm > 0.0) {
    for (int a = 0; a < 3; ++a) blur_axis(box, n, a, gaussian_kernel(spec.blur_sigma_mm, spc[a]));
  }
  double peak = 0.0;
  for (double v : box) peak = std::max(peak, v);

  CalcifiedVolume out{vol, VoxelMask(dims), vol, center};
  if (peak > 0.0) {
    for (int z = 0; z < n[0]; ++z)
      for (int y = 0; y < n[1]; ++y)
        for (int x = 0; x < n[2]; ++x) {
          const double b = box[box_index(z, y, x)] / peak;
          const double bs = std::min(1.0, spec.overshoot * b);
          if (bs <= 0.0) continue;
          float& v = out.corrupted.at(lo[0] + z, lo[1] + y, lo[2] + x);
          v = static_cast<float>(v + (spec.peak_hu - v) * bs);
        }
  }
  out.calcium_region = threshold_mask(out.corrupted, spec.threshold_hu);
  return out;
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const PhantomSpec& s) {
  return {{"dims", {s.dims.d, s.dims.h, s.dims.w}},
          {"spacing_mm", {s.spacing.z, s.spacing.y, s.spacing.x}},
          {"lumen_hu", s.lumen_hu},
          {"wall_hu", s.wall_hu},
          {"background_mean_hu", s.background_mean_hu},
          {"background_sigma_hu", s.background_sigma_hu},
          {"wall_thickness_mm", s.wall_thickness_mm},
          {"curvature", s.curvature},
          {"radius_range_mm", {s.radius_min_mm, s.radius_max_mm}},
          {"control_points", {s.control_points_min, s.control_points_max}},
          {"random_axis", s.random_axis}};
}

PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  try {
    if (j.contains("dims")) {
      const auto d = j.at("dims").get<std::vector<int>>();
      if (d.size() != 3) throw config_error("phantom dims must have 3 entries");
      s.dims = {d[0], d[1], d[2]};
    }
    if (j.contains("spacing_mm")) {
      const auto v = j.at("spacing_mm").get<std::vector<float>>();
      if (v.size() != 3) throw config_error("phantom spacing must have 3 entries");
      s.spacing = {v[0], v[1], v[2]};
    }
    s.lumen_hu = j.value("lumen_hu", s.lumen_hu);
    s.wall_hu = j.value("wall_hu", s.wall_hu);
    s.background_mean_hu = j.value("background_mean_hu", s.background_mean_hu);
    s.background_sigma_hu = j.value("background_sigma_hu", s.background_sigma_hu);
    s.wall_thickness_mm = j.value("wall_thickness_mm", s.wall_thickness_mm);
    s.curvature = j.value("curvature", s.curvature);
    if (j.contains("radius_range_mm")) {
      const auto r = j.at("radius_range_mm").get<std::vector<double>>();
      if (r.size() != 2) throw config_error("radius_range_mm must have 2 entries");
      s.radius_min_mm = r[0];
      s.radius_max_mm = r[1];
    }
    if (j.contains("control_points")) {
      const auto c = j.at("control_points").get<std::vector<int>>();
      if (c.size() != 2) throw config_error("control_points must have 2 entries");
      s.control_points_min = c[0];
      s.control_points_max = c[1];
    }
    s.random_axis = j.value("random_axis", s.random_axis);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("invalid phantom spec: ") + e.what());
  }
  s.validate();
  return s;
}

nlohmann::json to_json(const CalciumSpec& s) {
  return {{"peak_hu", s.peak_hu},         {"plaque_radius_mm", s.plaque_radius_mm},
          {"blur_sigma_mm", s.blur_sigma_mm}, {"overshoot", s.overshoot},
          {"placement_mm", s.placement_mm}, {"wall_offset", s.wall_offset},
          {"threshold_hu", s.threshold_hu}};
}

CalciumSpec calcium_spec_from_json(const nlohmann::json& j) {
  CalciumSpec s;
  try {
    s.peak_hu = j.value("peak_hu", s.peak_hu);
    s.plaque_radius_mm = j.value("plaque_radius_mm", s.plaque_radius_mm);
    s.blur_sigma_mm = j.value("blur_sigma_mm", s.blur_sigma_mm);
    s.overshoot = j.value("overshoot", s.overshoot);
    s.placement_mm = j.value("placement_mm", s.placement_mm);
    s.wall_offset = j.value("wall_offset", s.wall_offset);
    s.threshold_hu = j.value("threshold_hu", s.threshold_hu);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("invalid calcium spec: ") + e.what());
  }
  s.validate();
  return s;
}

nlohmann::json to_json(const Centerline& cl) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : cl.points) pts.push_back({p.z, p.y, p.x});
  return {{"points_mm", pts}, {"radii_mm", cl.radii}};
}

Centerline centerline_from_json(const nlohmann::json& j) {
  Centerline cl;
  try {
    for (const auto& p : j.at("points_mm")) {
      const auto v = p.get<std::vector<double>>();
      if (v.size() != 3) throw parse_error("centerline point must have 3 coordinates");
      cl.points.push_back({v[0], v[1], v[2]});
    }
    cl.radii = j.at("radii_mm").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(std::string("malformed centerline record: ") + e.what());
  }
  cl.validate();
  return cl;
}

}  // namespace densemae
