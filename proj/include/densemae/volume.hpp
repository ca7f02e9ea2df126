#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace densemae {

struct Dims {
  int d = 0;
  int h = 0;
  int w = 0;

  std::size_t voxels() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  bool contains(int z, int y, int x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < d && y < h && x < w;
  }
  bool operator==(const Dims&) const = default;
};

// "(d, h, w)"
std::string to_string(Dims dims);

// Physical voxel size in millimetres, ordered (z, y, x) like Dims.
struct Spacing {
  float z = 1.0f;
  float y = 1.0f;
  float x = 1.0f;
  bool operator==(const Spacing&) const = default;
};

struct Index3 {
  int z = 0;
  int y = 0;
  int x = 0;
  bool operator==(const Index3&) const = default;
};

// Dense scalar grid, row-major with x fastest. Values are HU unless the
// volume is flagged normalized, in which case every value lies in [0, 1].
class Volume {
 public:
  Volume() = default;
  Volume(Dims dims, Spacing spacing, float fill = 0.0f, bool normalized = false);
  Volume(Dims dims, Spacing spacing, std::vector<float> values, bool normalized = false);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  bool normalized() const { return normalized_; }
  // Re-flagging checks the [0, 1] invariant.
  void set_normalized(bool normalized);

  std::size_t size() const { return values_.size(); }
  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * dims_.h + static_cast<std::size_t>(y)) * dims_.w +
           static_cast<std::size_t>(x);
  }
  float& at(int z, int y, int x) { return values_[index(z, y, x)]; }
  float at(int z, int y, int x) const { return values_[index(z, y, x)]; }
  float& operator[](std::size_t i) { return values_[i]; }
  float operator[](std::size_t i) const { return values_[i]; }

  std::span<float> values() { return values_; }
  std::span<const float> values() const { return values_; }
  std::vector<float>& raw() { return values_; }
  const std::vector<float>& raw() const { return values_; }

 private:
  Dims dims_{};
  Spacing spacing_{};
  std::vector<float> values_;
  bool normalized_ = false;
};

// Binary voxel set over a grid; 1 = member.
struct VoxelMask {
  Dims dims{};
  std::vector<std::uint8_t> bits;

  VoxelMask() = default;
  explicit VoxelMask(Dims d, std::uint8_t fill = 0) : dims(d), bits(d.voxels(), fill) {}
  std::size_t count() const;
  bool empty() const { return count() == 0; }
};

struct WindowSpec {
  float hu_min = -1024.0f;
  float hu_max = 3071.0f;

  float to_normalized(float hu) const;
  float to_hu(float normalized) const { return hu_min + normalized * (hu_max - hu_min); }
};

// clamp((v - hu_min) / (hu_max - hu_min), 0, 1) voxel-wise.
Volume window_normalize(const Volume& vol, const WindowSpec& window);

struct Patch {
  Index3 origin;  // parent index of patch voxel (0, 0, 0); may be negative near borders
  int size = 0;
  Volume values;
};

// Cubic sub-volume of edge `edge` whose voxel (edge/2, edge/2, edge/2) sits on
// `center`. Out-of-bounds samples replicate the nearest edge voxel.
Patch extract_patch(const Volume& vol, Index3 center, int edge);

// Writes the in-bounds part of a patch back into its parent volume.
void write_patch(Volume& vol, const Patch& patch);

// "VXMA" little-endian volume file; see README for the layout.
void save_volume(const Volume& vol, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_volume(const Volume& vol);
Volume decode_volume(std::span<const std::uint8_t> bytes);

}  // namespace densemae
