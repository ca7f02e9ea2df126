#pragma once

#include <cstdint>
#include <vector>

#include "densemae/centerline.hpp"
#include "densemae/rng.hpp"
#include "densemae/volume.hpp"
#include "json.hpp"

namespace densemae {

// Non-overlapping cubic tokens of edge T tiling a P^3 patch; G = P / T per axis.
struct TokenGridSpec {
  int patch_edge = 32;
  int token_edge = 4;
  int grid_edge = 8;

  int tokens() const { return grid_edge * grid_edge * grid_edge; }
  int index(int tz, int ty, int tx) const { return (tz * grid_edge + ty) * grid_edge + tx; }
  bool operator==(const TokenGridSpec&) const = default;
};

TokenGridSpec partition(int patch_edge, int token_edge);

// One decision per token, 1 = masked (member of the masked set).
struct TokenMask {
  TokenGridSpec grid;
  std::vector<std::uint8_t> decisions;

  TokenMask() = default;
  explicit TokenMask(const TokenGridSpec& g) : grid(g), decisions(g.tokens(), 0) {}
  std::size_t masked_count() const;
  double ratio() const;
  // Ascending token indices of the masked set.
  std::vector<int> masked_indices() const;
};

// floor(rho * N) tokens, uniformly without replacement.
TokenMask random_mask(const TokenGridSpec& grid, double rho, Rng& rng);

// Maps token grid coordinates to the millimetre frame a centerline lives in.
struct PatchFrame {
  Spacing spacing;
  Vec3 origin;  // position of voxel (0, 0, 0)

  Vec3 token_center(const TokenGridSpec& grid, int tz, int ty, int tx) const;
};

// Tokens whose centre lies within the local radius plus one token edge of the
// centerline, ordered by the arc length of their closest centerline point.
std::vector<int> vessel_tokens(const TokenGridSpec& grid, const Centerline& cl,
                               const PatchFrame& frame);

// floor(rho * N) tokens in total; min(floor(beta * rho * N), |vessel tokens|)
// of them are vessel tokens taken as contiguous arc-length runs of G tokens
// from random starts, the rest uniform over the remaining tokens. beta = 0
// consumes the generator exactly like random_mask.
TokenMask vessel_aware_mask(const TokenGridSpec& grid, const Centerline& cl,
                            const PatchFrame& frame, double rho, double beta, Rng& rng);

// The C^3 token cube with corner floor((G - C) / 2) on every axis.
TokenMask center_mask(const TokenGridSpec& grid, int cube_tokens);

// Token decisions replicated over T^3 voxel blocks (1 = masked voxel).
VoxelMask upsample_mask(const TokenMask& mask);

// X ⊙ Upsample(visibility): masked voxels take `fill`, visible voxels are copied.
Volume apply_mask(const Volume& patch, const TokenMask& mask, float fill = 0.0f);
Volume apply_mask(const Volume& patch, const VoxelMask& mask, float fill = 0.0f);

// {"P", "T", "masked"} record.
nlohmann::json mask_to_json(const TokenMask& mask);
TokenMask mask_from_json(const nlohmann::json& j);

}  // namespace densemae
