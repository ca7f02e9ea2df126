#include "densemae/losses.hpp"

#include <algorithm>
#include <cmath>

#include "densemae/errors.hpp"

namespace densemae {

namespace {

void check_sizes(std::size_t pred, std::size_t target, std::size_t mask, std::size_t grad) {
  if (pred != target || pred != mask) {
    throw shape_error("loss inputs differ in size: pred " + std::to_string(pred) + ", target " +
                      std::to_string(target) + ", mask " + std::to_string(mask));
  }
  if (grad != 0 && grad != pred) {
    throw shape_error("loss gradient buffer has " + std::to_string(grad) + " elements, expected " +
                      std::to_string(pred));
  }
}

// Separable max filter along one axis.
void dilate_axis(std::vector<std::uint8_t>& bits, Dims dims, int axis, int radius) {
  const int len = axis == 0 ? dims.d : axis == 1 ? dims.h : dims.w;
  const std::size_t stride = axis == 0 ? static_cast<std::size_t>(dims.h) * dims.w
                             : axis == 1 ? static_cast<std::size_t>(dims.w)
                                         : 1;
  const int outer_a = axis == 0 ? dims.h : dims.d;
  const int outer_b = axis == 2 ? dims.h : dims.w;
  std::vector<std::uint8_t> line(len), out(len);
  for (int a = 0; a < outer_a; ++a) {
    for (int b = 0; b < outer_b; ++b) {
      std::size_t base;
      if (axis == 0) base = static_cast<std::size_t>(a) * dims.w + b;
      else if (axis == 1) base = static_cast<std::size_t>(a) * dims.h * dims.w + b;
      else base = (static_cast<std::size_t>(a) * dims.h + b) * dims.w;
      for (int i = 0; i < len; ++i) line[i] = bits[base + i * stride];
      // Running count of set bits in the window [i - r, i + r].
      int count = 0;
      for (int i = 0; i <= std::min(radius, len - 1); ++i) count += line[i];
      for (int i = 0; i < len; ++i) {
        out[i] = count > 0 ? 1 : 0;
        const int enter = i + radius + 1;
        const int leave = i - radius;
        if (enter < len) count += line[enter];
        if (leave >= 0) count -= line[leave];
      }
      for (int i = 0; i < len; ++i) bits[base + i * stride] = out[i];
    }
  }
}

std::vector<std::uint8_t> dilate_bits(std::span<const std::uint8_t> mask, Dims dims, int radius) {
  std::vector<std::uint8_t> bits(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) bits[i] = mask[i] ? 1 : 0;
  if (radius > 0) {
    for (int axis = 0; axis < 3; ++axis) dilate_axis(bits, dims, axis, radius);
  }
  return bits;
}

}  // namespace

template <class T>
double masked_mse(std::span<const T> pred, std::span<const T> target,
                  std::span<const std::uint8_t> mask, std::span<T> grad, double scale) {
  check_sizes(pred.size(), target.size(), mask.size(), grad.size());
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask[i]) continue;
    const double diff = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    sum += diff * diff;
    ++count;
  }
  if (count == 0) throw invalid_argument("masked_mse: masked voxel set is empty");
  if (!grad.empty()) {
    const double g = 2.0 * scale / static_cast<double>(count);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (!mask[i]) continue;
      grad[i] += static_cast<T>(g * (static_cast<double>(pred[i]) - static_cast<double>(target[i])));
    }
  }
  return sum / static_cast<double>(count);
}

template <class T>
double edge_loss(std::span<const T> pred, std::span<const T> target,
                 std::span<const std::uint8_t> mask, Dims dims, int dilation, std::span<T> grad,
                 double scale) {
  check_sizes(pred.size(), target.size(), mask.size(), grad.size());
  if (pred.size() != dims.voxels()) {
    throw shape_error("edge_loss: " + std::to_string(pred.size()) +
                      " values do not match dims " + to_string(dims));
  }
  if (dilation < 0) throw invalid_argument("edge_loss: dilation must be >= 0");
  const std::vector<std::uint8_t> region = dilate_bits(mask, dims, dilation);
  const std::size_t strides[3] = {static_cast<std::size_t>(dims.h) * dims.w,
                                  static_cast<std::size_t>(dims.w), 1};
  const int extent[3] = {dims.d, dims.h, dims.w};

  auto for_each_term = [&](auto&& fn) {
    std::size_t i = 0;
    for (int z = 0; z < dims.d; ++z) {
      for (int y = 0; y < dims.h; ++y) {
        for (int x = 0; x < dims.w; ++x, ++i) {
          if (!region[i]) continue;
          const int coord[3] = {z, y, x};
          for (int a = 0; a < 3; ++a) {
            if (coord[a] + 1 >= extent[a]) continue;
            const std::size_t j = i + strides[a];
            if (region[j]) fn(i, j);
          }
        }
      }
    }
  };

  double sum = 0.0;
  std::size_t count = 0;
  for_each_term([&](std::size_t i, std::size_t j) {
    const double dp = static_cast<double>(pred[j]) - static_cast<double>(pred[i]);
    const double dt = static_cast<double>(target[j]) - static_cast<double>(target[i]);
    sum += std::abs(dp - dt);
    ++count;
  });
  if (count == 0) throw invalid_argument("edge_loss: evaluation region is empty");
  if (!grad.empty()) {
    const double g = scale / static_cast<double>(count);
    for_each_term([&](std::size_t i, std::size_t j) {
      const double dp = static_cast<double>(pred[j]) - static_cast<double>(pred[i]);
      const double dt = static_cast<double>(target[j]) - static_cast<double>(target[i]);
      const double r = dp - dt;
      if (r == 0.0) return;
      const T s = static_cast<T>(r > 0.0 ? g : -g);
      grad[j] += s;
      grad[i] -= s;
    });
  }
  return sum / static_cast<double>(count);
}

template <class T>
LossTerms total_loss(std::span<const T> pred, std::span<const T> target,
                     std::span<const std::uint8_t> mask, Dims dims, const LossConfig& cfg,
                     std::span<T> grad, double scale) {
  if (!(cfg.edge_weight >= 0.0)) throw invalid_argument("edge loss weight must be >= 0");
  LossTerms terms;
  terms.mse = masked_mse<T>(pred, target, mask, grad, scale);
  if (cfg.edge_weight > 0.0) {
    terms.edge =
        edge_loss<T>(pred, target, mask, dims, cfg.edge_dilation, grad, scale * cfg.edge_weight);
  }
  terms.total = terms.mse + cfg.edge_weight * terms.edge;
  return terms;
}

template double masked_mse<float>(std::span<const float>, std::span<const float>,
                                  std::span<const std::uint8_t>, std::span<float>, double);
template double masked_mse<double>(std::span<const double>, std::span<const double>,
                                   std::span<const std::uint8_t>, std::span<double>, double);
template double edge_loss<float>(std::span<const float>, std::span<const float>,
                                 std::span<const std::uint8_t>, Dims, int, std::span<float>,
                                 double);
template double edge_loss<double>(std::span<const double>, std::span<const double>,
                                  std::span<const std::uint8_t>, Dims, int, std::span<double>,
                                  double);
template LossTerms total_loss<float>(std::span<const float>, std::span<const float>,
                                     std::span<const std::uint8_t>, Dims, const LossConfig&,
                                     std::span<float>, double);
template LossTerms total_loss<double>(std::span<const double>, std::span<const double>,
                                      std::span<const std::uint8_t>, Dims, const LossConfig&,
                                      std::span<double>, double);

namespace {
void check_volume_shapes(const Volume& pred, const Volume& target, const VoxelMask& mask) {
  if (pred.dims() != target.dims() || pred.dims() != mask.dims) {
    throw shape_error("loss inputs have mismatched dims: " + to_string(pred.dims()) + ", " +
                      to_string(target.dims()) + ", " + to_string(mask.dims));
  }
}
}  // namespace

double masked_mse(const Volume& pred, const Volume& target, const VoxelMask& mask) {
  check_volume_shapes(pred, target, mask);
  return masked_mse<float>(pred.values(), target.values(), mask.bits);
}

double edge_loss(const Volume& pred, const Volume& target, const VoxelMask& mask, int dilation) {
  check_volume_shapes(pred, target, mask);
  return edge_loss<float>(pred.values(), target.values(), mask.bits, pred.dims(), dilation);
}

LossTerms total_loss(const Volume& pred, const Volume& target, const VoxelMask& mask,
                     const LossConfig& cfg) {
  check_volume_shapes(pred, target, mask);
  return total_loss<float>(pred.values(), target.values(), mask.bits, pred.dims(), cfg);
}

VoxelMask dilate(const VoxelMask& mask, int radius) {
  if (radius < 0) throw invalid_argument("dilation radius must be >= 0");
  if (mask.bits.size() != mask.dims.voxels()) throw shape_error("voxel mask size mismatch");
  VoxelMask out(mask.dims);
  out.bits = dilate_bits(mask.bits, mask.dims, radius);
  return out;
}

}  // namespace densemae
