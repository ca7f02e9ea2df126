#include "densemae/baselines.hpp"

#include <algorithm>
#include <deque>

#include "densemae/errors.hpp"
#include "densemae/spline.hpp"

namespace densemae {

namespace {

// Value of a nearest visible voxel (6-connected breadth-first order) for every voxel.
std::vector<float> nearest_visible(const Volume& patch, const VoxelMask& mask) {
  const Dims d = patch.dims();
  std::vector<float> out(patch.size(), 0.0f);
  std::vector<std::uint8_t> seen(patch.size(), 0);
  std::deque<std::size_t> queue;
  for (std::size_t i = 0; i < patch.size(); ++i) {
    if (!mask.bits[i]) {
      out[i] = patch[i];
      seen[i] = 1;
      queue.push_back(i);
    }
  }
  const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    const int z = static_cast<int>(i / plane), y = static_cast<int>((i / d.w) % d.h),
              x = static_cast<int>(i % d.w);
    const int step[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
    for (const auto& s : step) {
      const int a = z + s[0], b = y + s[1], c = x + s[2];
      if (!d.contains(a, b, c)) continue;
      const std::size_t j = patch.index(a, b, c);
      if (seen[j]) continue;
      seen[j] = 1;
      out[j] = out[i];
      queue.push_back(j);
    }
  }
  return out;
}

}  // namespace

Volume interpolation_inpaint(const Volume& patch, const VoxelMask& mask) {
  const Dims d = patch.dims();
  if (mask.dims != d) {
    throw shape_error("interpolation mask dims " + to_string(mask.dims) + " differ from patch dims " +
                      to_string(d));
  }
  if (!patch.normalized()) throw invalid_argument("interpolation expects a normalized patch");
  const std::size_t masked = mask.count();
  if (masked == patch.size()) throw invalid_argument("interpolation needs at least one visible voxel");

  Volume out = patch;
  if (masked == 0) return out;

  const std::vector<float> fallback = nearest_visible(patch, mask);
  std::vector<double> sum(patch.size(), 0.0);

  const int extent[3] = {d.d, d.h, d.w};
  for (int axis = 0; axis < 3; ++axis) {
    const int u = (axis + 1) % 3, v = (axis + 2) % 3;
    for (int a = 0; a < extent[u]; ++a)
      for (int b = 0; b < extent[v]; ++b) {
        auto index_at = [&](int t) {
          int c[3];
          c[axis] = t;
          c[u] = a;
          c[v] = b;
          return patch.index(c[0], c[1], c[2]);
        };
        std::vector<double> knots, values;
        bool any_masked = false;
        for (int t = 0; t < extent[axis]; ++t) {
          const std::size_t i = index_at(t);
          if (mask.bits[i]) {
            any_masked = true;
          } else {
            knots.push_back(t);
            values.push_back(patch[i]);
          }
        }
        if (!any_masked) continue;
        if (knots.size() < 2) {
          for (int t = 0; t < extent[axis]; ++t) {
            const std::size_t i = index_at(t);
            if (mask.bits[i]) sum[i] += fallback[i];
          }
          continue;
        }
        const NaturalCubicSpline spline(std::move(knots), std::move(values));
        for (int t = 0; t < extent[axis]; ++t) {
          const std::size_t i = index_at(t);
          if (mask.bits[i]) sum[i] += spline(t);
        }
      }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask.bits[i]) out[i] = static_cast<float>(std::clamp(sum[i] / 3.0, 0.0, 1.0));
  }
  return out;
}

}  // namespace densemae
