#pragma once

#include "densemae/volume.hpp"

namespace densemae {

// Separable natural-cubic-spline fill of the masked voxels: every axis-aligned
// line through the mask is fitted to its visible samples and the three axis
// predictions are averaged. Lines with fewer than two visible samples use the
// nearest visible voxel instead. Visible voxels are copied; output is clamped to [0, 1].
Volume interpolation_inpaint(const Volume& patch, const VoxelMask& mask);

}  // namespace densemae
