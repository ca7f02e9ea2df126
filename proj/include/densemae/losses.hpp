#pragma once

#include <cstdint>
#include <span>

#include "densemae/volume.hpp"

namespace densemae {

struct LossConfig {
  double edge_weight = 0.1;  // lambda
  int edge_dilation = 1;     // voxels; cube (Chebyshev) dilation of the masked set
};

struct LossTerms {
  double mse = 0.0;
  double edge = 0.0;
  double total = 0.0;
};

// Mean squared error over the masked voxel set (mask byte != 0).
// If `grad` is non-empty, dL/dpred is added into it (scaled by `scale`).
template <class T>
double masked_mse(std::span<const T> pred, std::span<const T> target,
                  std::span<const std::uint8_t> mask, std::span<T> grad = {}, double scale = 1.0);

// Mean over (voxel, axis) terms of |d_a pred - d_a target| with forward
// differences d_a. A term (i, a) is counted when both i and i + e_a lie in the
// masked set dilated by `dilation`; terms never reach outside that region.
template <class T>
double edge_loss(std::span<const T> pred, std::span<const T> target,
                 std::span<const std::uint8_t> mask, Dims dims, int dilation,
                 std::span<T> grad = {}, double scale = 1.0);

// masked_mse + lambda * edge_loss. The edge term is skipped entirely when lambda == 0.
template <class T>
LossTerms total_loss(std::span<const T> pred, std::span<const T> target,
                     std::span<const std::uint8_t> mask, Dims dims, const LossConfig& cfg,
                     std::span<T> grad = {}, double scale = 1.0);

// Volume-level conveniences.
double masked_mse(const Volume& pred, const Volume& target, const VoxelMask& mask);
double edge_loss(const Volume& pred, const Volume& target, const VoxelMask& mask, int dilation);
LossTerms total_loss(const Volume& pred, const Volume& target, const VoxelMask& mask,
                     const LossConfig& cfg);

// Cube dilation by `radius` voxels (radius 0 copies).
VoxelMask dilate(const VoxelMask& mask, int radius);

}  // namespace densemae
