#include "densemae/volume.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "densemae/errors.hpp"

namespace densemae {

std::string to_string(Dims dims) {
  return "(" + std::to_string(dims.d) + ", " + std::to_string(dims.h) + ", " +
         std::to_string(dims.w) + ")";
}

namespace {

constexpr char kMagic[4] = {'V', 'X', 'M', 'A'};
constexpr std::uint16_t kFormatVersion = 1;
constexpr std::uint16_t kFlagNormalized = 1u << 0;
constexpr std::size_t kHeaderBytes = 4 + 2 + 2;
constexpr std::size_t kDimsBytes = 3 * 4;
constexpr std::size_t kSpacingBytes = 3 * 4;

void validate_geometry(const Dims& dims, const Spacing& spacing) {
  if (dims.d <= 0 || dims.h <= 0 || dims.w <= 0) {
    throw invalid_argument("volume dims must be positive, got (" + std::to_string(dims.d) + ", " +
                           std::to_string(dims.h) + ", " + std::to_string(dims.w) + ")");
  }
  if (!(spacing.z > 0.0f) || !(spacing.y > 0.0f) || !(spacing.x > 0.0f)) {
    throw invalid_argument("volume spacing must be strictly positive");
  }
}

void check_unit_range(std::span<const float> values) {
  for (float v : values) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw invalid_argument("normalized volume holds a value outside [0, 1]");
    }
  }
}

template <class U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  std::uint8_t bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.insert(out.end(), bytes, bytes + sizeof(U));
}

template <class U>
U get_le(const std::uint8_t* p) {
  std::uint8_t bytes[sizeof(U)];
  std::memcpy(bytes, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

int clamp_index(int i, int n) { return std::clamp(i, 0, n - 1); }

}  // namespace

Volume::Volume(Dims dims, Spacing spacing, float fill, bool normalized)
    : dims_(dims), spacing_(spacing), normalized_(normalized) {
  validate_geometry(dims, spacing);
  values_.assign(dims.voxels(), fill);
  if (normalized) check_unit_range(values_);
}

Volume::Volume(Dims dims, Spacing spacing, std::vector<float> values, bool normalized)
    : dims_(dims), spacing_(spacing), values_(std::move(values)), normalized_(normalized) {
  validate_geometry(dims, spacing);
  if (values_.size() != dims.voxels()) {
    throw shape_error("value array length " + std::to_string(values_.size()) +
                      " does not match dims product " + std::to_string(dims.voxels()));
  }
  if (normalized) check_unit_range(values_);
}

void Volume::set_normalized(bool normalized) {
  if (normalized) check_unit_range(values_);
  normalized_ = normalized;
}

std::size_t VoxelMask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

float WindowSpec::to_normalized(float hu) const {
  return std::clamp((hu - hu_min) / (hu_max - hu_min), 0.0f, 1.0f);
}

Volume window_normalize(const Volume& vol, const WindowSpec& window) {
  if (!(window.hu_min < window.hu_max)) {
    throw invalid_argument("window requires hu_min < hu_max");
  }
  std::vector<float> out(vol.size());
  std::transform(vol.raw().begin(), vol.raw().end(), out.begin(),
                 [&](float v) { return window.to_normalized(v); });
  return Volume(vol.dims(), vol.spacing(), std::move(out), true);
}

Patch extract_patch(const Volume& vol, Index3 center, int edge) {
  if (edge < 1) throw invalid_argument("patch edge must be >= 1");
  const Dims& dims = vol.dims();
  if (!dims.contains(center.z, center.y, center.x)) {
    throw invalid_argument("patch center (" + std::to_string(center.z) + ", " +
                           std::to_string(center.y) + ", " + std::to_string(center.x) +
                           ") lies outside the volume");
  }
  const int half = edge / 2;
  Patch patch;
  patch.origin = {center.z - half, center.y - half, center.x - half};
  patch.size = edge;
  std::vector<float> values(static_cast<std::size_t>(edge) * edge * edge);
  std::size_t i = 0;
  for (int z = 0; z < edge; ++z) {
    const int sz = clamp_index(patch.origin.z + z, dims.d);
    for (int y = 0; y < edge; ++y) {
      const int sy = clamp_index(patch.origin.y + y, dims.h);
      for (int x = 0; x < edge; ++x) {
        values[i++] = vol.at(sz, sy, clamp_index(patch.origin.x + x, dims.w));
      }
    }
  }
  patch.values = Volume({edge, edge, edge}, vol.spacing(), std::move(values), vol.normalized());
  return patch;
}

void write_patch(Volume& vol, const Patch& patch) {
  const Dims& dims = vol.dims();
  for (int z = 0; z < patch.size; ++z) {
    for (int y = 0; y < patch.size; ++y) {
      for (int x = 0; x < patch.size; ++x) {
        const int pz = patch.origin.z + z, py = patch.origin.y + y, px = patch.origin.x + x;
        if (dims.contains(pz, py, px)) vol.at(pz, py, px) = patch.values.at(z, y, x);
      }
    }
  }
}

std::vector<std::uint8_t> encode_volume(const Volume& vol) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + kDimsBytes + kSpacingBytes + 4 * vol.size());
  out.insert(out.end(), kMagic, kMagic + 4);
  put_le<std::uint16_t>(out, kFormatVersion);
  put_le<std::uint16_t>(out, vol.normalized() ? kFlagNormalized : 0);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(vol.dims().d));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(vol.dims().h));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(vol.dims().w));
  put_le<float>(out, vol.spacing().z);
  put_le<float>(out, vol.spacing().y);
  put_le<float>(out, vol.spacing().x);
  if constexpr (std::endian::native == std::endian::little) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(vol.raw().data());
    out.insert(out.end(), p, p + 4 * vol.size());
  } else {
    for (float v : vol.raw()) put_le<float>(out, v);
  }
  return out;
}

Volume decode_volume(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const char* section) {
    if (bytes.size() - pos < n) {
      throw parse_error(std::string("truncated volume file: missing ") + section);
    }
  };
  need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw parse_error("bad volume magic (expected VXMA)");
  pos += 4;
  need(4, "header (version, flags)");
  const auto version = get_le<std::uint16_t>(bytes.data() + pos);
  const auto flags = get_le<std::uint16_t>(bytes.data() + pos + 2);
  pos += 4;
  if (version != kFormatVersion) {
    throw parse_error("unsupported volume format version " + std::to_string(version));
  }
  need(kDimsBytes, "dims");
  const auto d = get_le<std::uint32_t>(bytes.data() + pos);
  const auto h = get_le<std::uint32_t>(bytes.data() + pos + 4);
  const auto w = get_le<std::uint32_t>(bytes.data() + pos + 8);
  pos += kDimsBytes;
  if (d == 0 || h == 0 || w == 0 || d > (1u << 16) || h > (1u << 16) || w > (1u << 16)) {
    throw parse_error("corrupt volume dims");
  }
  need(kSpacingBytes, "spacing");
  Spacing spacing{get_le<float>(bytes.data() + pos), get_le<float>(bytes.data() + pos + 4),
                  get_le<float>(bytes.data() + pos + 8)};
  pos += kSpacingBytes;
  const Dims dims{static_cast<int>(d), static_cast<int>(h), static_cast<int>(w)};
  const std::size_t payload = bytes.size() - pos;
  if (payload != 4 * dims.voxels()) {
    throw parse_error("volume payload holds " + std::to_string(payload / 4) +
                      " values but dims product is " + std::to_string(dims.voxels()) +
                      (payload < 4 * dims.voxels() ? " (missing payload)" : " (trailing data)"));
  }
  std::vector<float> values(dims.voxels());
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(values.data(), bytes.data() + pos, payload);
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = get_le<float>(bytes.data() + pos + 4 * i);
  }
  try {
    return Volume(dims, spacing, std::move(values), (flags & kFlagNormalized) != 0);
  } catch (const Error& e) {
    throw parse_error(std::string("invalid volume contents: ") + e.what());
  }
}

void save_volume(const Volume& vol, const std::filesystem::path& path) {
  const auto bytes = encode_volume(vol);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("failed writing " + path.string());
}

Volume load_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_volume(bytes);
  } catch (const Error& e) {
    throw Error(e.category(), path.string() + ": " + e.what());
  }
}

}  // namespace densemae
