#include "densemae/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "densemae/errors.hpp"

namespace densemae {

TokenGridSpec partition(int patch_edge, int token_edge) {
  if (token_edge < 1) throw invalid_argument("token edge must be >= 1");
  if (patch_edge < 1) throw invalid_argument("patch edge must be >= 1");
  if (patch_edge % token_edge != 0) {
    throw invalid_argument("token edge " + std::to_string(token_edge) +
                           " does not divide patch edge " + std::to_string(patch_edge));
  }
  return TokenGridSpec{patch_edge, token_edge, patch_edge / token_edge};
}

std::size_t TokenMask::masked_count() const {
  return static_cast<std::size_t>(std::count_if(decisions.begin(), decisions.end(),
                                                [](std::uint8_t d) { return d != 0; }));
}

double TokenMask::ratio() const {
  return decisions.empty() ? 0.0 : static_cast<double>(masked_count()) / decisions.size();
}

std::vector<int> TokenMask::masked_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < decisions.size(); ++i)
    if (decisions[i]) out.push_back(static_cast<int>(i));
  return out;
}

namespace {

void check_ratio(double value, const char* name) {
  if (!(value >= 0.0 && value <= 1.0)) {
    throw invalid_argument(std::string(name) + " must lie in [0, 1], got " + std::to_string(value));
  }
}

// The epsilon keeps decimal products such as 0.29 * 100 at their exact integer.
std::size_t floor_count(double ratio, double n) {
  return static_cast<std::size_t>(std::floor(ratio * n + 1e-9));
}

// Marks `count` uniformly chosen tokens among the unmasked ones (partial
// Fisher-Yates over the candidates in index order).
void mask_uniform(TokenMask& mask, std::size_t count, Rng& rng) {
  std::vector<int> candidates;
  candidates.reserve(mask.decisions.size());
  for (std::size_t i = 0; i < mask.decisions.size(); ++i)
    if (!mask.decisions[i]) candidates.push_back(static_cast<int>(i));
  count = std::min(count, candidates.size());
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(candidates.size() - i));
    std::swap(candidates[i], candidates[j]);
    mask.decisions[candidates[i]] = 1;
  }
}

}  // namespace

TokenMask random_mask(const TokenGridSpec& grid, double rho, Rng& rng) {
  check_ratio(rho, "masking ratio");
  TokenMask mask(grid);
  mask_uniform(mask, floor_count(rho, grid.tokens()), rng);
  return mask;
}

Vec3 PatchFrame::token_center(const TokenGridSpec& grid, int tz, int ty, int tx) const {
  const double half = (grid.token_edge - 1) / 2.0;
  const double T = grid.token_edge;
  return origin + Vec3{(tz * T + half) * spacing.z, (ty * T + half) * spacing.y,
                       (tx * T + half) * spacing.x};
}

std::vector<int> vessel_tokens(const TokenGridSpec& grid, const Centerline& cl,
                               const PatchFrame& frame) {
  cl.validate();
  const double token_mm =
      grid.token_edge * (frame.spacing.z + frame.spacing.y + frame.spacing.x) / 3.0;
  std::vector<std::pair<double, int>> found;
  for (int tz = 0; tz < grid.grid_edge; ++tz)
    for (int ty = 0; ty < grid.grid_edge; ++ty)
      for (int tx = 0; tx < grid.grid_edge; ++tx) {
        const ClosestPoint cp = closest_point(cl, frame.token_center(grid, tz, ty, tx));
        if (cp.distance <= cp.radius + token_mm) found.emplace_back(cp.arc_length, grid.index(tz, ty, tx));
      }
  std::sort(found.begin(), found.end());
  std::vector<int> out;
  out.reserve(found.size());
  for (const auto& f : found) out.push_back(f.second);
  return out;
}

TokenMask vessel_aware_mask(const TokenGridSpec& grid, const Centerline& cl,
                            const PatchFrame& frame, double rho, double beta, Rng& rng) {
  check_ratio(rho, "masking ratio");
  check_ratio(beta, "vessel preference");
  const std::size_t total = floor_count(rho, grid.tokens());
  const std::size_t wanted = floor_count(beta * rho, grid.tokens());
  TokenMask mask(grid);
  if (wanted > 0) {
    const std::vector<int> ordered = vessel_tokens(grid, cl, frame);
    const std::size_t target = std::min({wanted, ordered.size(), total});
    std::vector<std::uint8_t> taken(ordered.size(), 0);
    std::size_t chosen = 0;
    std::vector<std::size_t> open;
    while (chosen < target) {
      open.clear();
      for (std::size_t i = 0; i < ordered.size(); ++i)
        if (!taken[i]) open.push_back(i);
      std::size_t pos = open[rng.below(open.size())];
      // One run: up to G untaken tokens following `pos` along the centerline.
      int run = 0;
      for (; pos < ordered.size() && run < grid.grid_edge && chosen < target; ++pos) {
        if (taken[pos]) continue;
        taken[pos] = 1;
        mask.decisions[ordered[pos]] = 1;
        ++chosen;
        ++run;
      }
    }
    mask_uniform(mask, total - chosen, rng);
  } else {
    mask_uniform(mask, total, rng);
  }
  return mask;
}

TokenMask center_mask(const TokenGridSpec& grid, int cube_tokens) {
  if (cube_tokens < 1 || cube_tokens > grid.grid_edge) {
    throw invalid_argument("center cube of " + std::to_string(cube_tokens) +
                           " tokens does not fit a grid of edge " + std::to_string(grid.grid_edge));
  }
  TokenMask mask(grid);
  const int lo = (grid.grid_edge - cube_tokens) / 2;
  for (int tz = lo; tz < lo + cube_tokens; ++tz)
    for (int ty = lo; ty < lo + cube_tokens; ++ty)
      for (int tx = lo; tx < lo + cube_tokens; ++tx) mask.decisions[grid.index(tz, ty, tx)] = 1;
  return mask;
}

VoxelMask upsample_mask(const TokenMask& mask) {
  const TokenGridSpec& g = mask.grid;
  if (mask.decisions.size() != static_cast<std::size_t>(g.tokens())) {
    throw shape_error("token mask holds " + std::to_string(mask.decisions.size()) +
                      " decisions for a grid of " + std::to_string(g.tokens()));
  }
  const int P = g.patch_edge, T = g.token_edge;
  VoxelMask out(Dims{P, P, P});
  std::size_t v = 0;
  for (int z = 0; z < P; ++z)
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < P; ++x, ++v) out.bits[v] = mask.decisions[g.index(z / T, y / T, x / T)];
  return out;
}

Volume apply_mask(const Volume& patch, const VoxelMask& mask, float fill) {
  if (patch.dims() != mask.dims || mask.bits.size() != patch.size()) {
    throw shape_error("mask dims " + to_string(mask.dims) + " do not match patch dims " +
                      to_string(patch.dims()));
  }
  if (!patch.normalized()) throw invalid_argument("apply_mask expects a normalized patch");
  std::vector<float> values(patch.raw());
  for (std::size_t i = 0; i < values.size(); ++i)
    if (mask.bits[i]) values[i] = fill;
  return Volume(patch.dims(), patch.spacing(), std::move(values), fill >= 0.0f && fill <= 1.0f);
}

Volume apply_mask(const Volume& patch, const TokenMask& mask, float fill) {
  const int P = mask.grid.patch_edge;
  if (patch.dims() != Dims{P, P, P}) {
    throw shape_error("patch dims " + to_string(patch.dims()) + " do not match a mask for P = " +
                      std::to_string(P));
  }
  return apply_mask(patch, upsample_mask(mask), fill);
}

nlohmann::json mask_to_json(const TokenMask& mask) {
  return {{"P", mask.grid.patch_edge}, {"T", mask.grid.token_edge}, {"masked", mask.masked_indices()}};
}

TokenMask mask_from_json(const nlohmann::json& j) {
  try {
    TokenMask mask(partition(j.at("P").get<int>(), j.at("T").get<int>()));
    for (int idx : j.at("masked").get<std::vector<int>>()) {
      if (idx < 0 || idx >= mask.grid.tokens()) throw parse_error("mask token index out of range");
      mask.decisions[idx] = 1;
    }
    return mask;
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(std::string("malformed mask record: ") + e.what());
  }
}

}  // namespace densemae
