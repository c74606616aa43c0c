#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "gscollab/core.hpp"

namespace gscollab {

/// Geometry of a dense X x Y x Z voxel grid. Voxel (ix,iy,iz) spans
/// [origin + i*voxel_size, origin + (i+1)*voxel_size) on each axis.
struct GridGeometry {
  Vec3 origin{-20.0, -20.0, -1.6};
  double voxel_size = 0.4;
  std::array<std::uint32_t, 3> dims{100, 100, 8};

  /// 100 x 100 x 8 at 0.4 m, centered on the agent: the 40 x 40 x 3.2 m area.
  static GridGeometry ego_default() { return {}; }

  std::size_t num_voxels() const { return std::size_t{dims[0]} * dims[1] * dims[2]; }
  /// x-major, then y, then z.
  std::size_t index(std::uint32_t ix, std::uint32_t iy, std::uint32_t iz) const {
    return (std::size_t{ix} * dims[1] + iy) * dims[2] + iz;
  }
  std::array<std::uint32_t, 3> coords(std::size_t index) const;
  Vec3 voxel_center(std::uint32_t ix, std::uint32_t iy, std::uint32_t iz) const {
    return {origin[0] + (ix + 0.5) * voxel_size, origin[1] + (iy + 0.5) * voxel_size,
            origin[2] + (iz + 0.5) * voxel_size};
  }
  Vec3 voxel_center(std::size_t index) const {
    const auto c = coords(index);
    return voxel_center(c[0], c[1], c[2]);
  }
  /// Region covered by the grid as an inclusive box.
  Roi bounds() const;

  void validate() const;
  friend bool operator==(const GridGeometry&, const GridGeometry&) = default;
};

/// Per-voxel, per-class aggregated evidence; layout index(v) * C + class.
struct ChannelGrid {
  GridGeometry geometry;
  std::vector<double> values;

  explicit ChannelGrid(const GridGeometry& g = {})
      : geometry(g), values(g.num_voxels() * kNumClasses, 0.0) {}

  double at(std::size_t voxel, std::size_t cls) const { return values[voxel * kNumClasses + cls]; }
  std::span<const double> voxel(std::size_t v) const { return {values.data() + v * kNumClasses, kNumClasses}; }
};

struct LabelGrid {
  GridGeometry geometry;
  std::vector<std::uint8_t> labels;

  explicit LabelGrid(const GridGeometry& g = {}) : geometry(g), labels(g.num_voxels(), kEmptyClass) {}

  friend bool operator==(const LabelGrid&, const LabelGrid&) = default;
};

/// VOXG binary export: magic "VOXG", u32 version = 1, u32 X, Y, Z, C,
/// f32 origin[3], f32 voxel_size, u8 payload kind (0 = f32 channels,
/// 1 = u8 labels), then the payload in x, y, z, channel order. All
/// little-endian. Geometry and channel values are stored at f32.
inline constexpr std::uint32_t kVoxgVersion = 1;
inline constexpr std::size_t kVoxgHeaderSize = 41;

std::vector<std::uint8_t> encode_voxg(const ChannelGrid& grid);
std::vector<std::uint8_t> encode_voxg(const LabelGrid& grid);

using VoxgContent = std::variant<ChannelGrid, LabelGrid>;
/// Throws DecodeError on bad magic, version, truncation or trailing bytes.
VoxgContent decode_voxg(std::span<const std::uint8_t> bytes);

}  // namespace gscollab
