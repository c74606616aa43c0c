#include "gscollab/voxel_grid.hpp"

#include <cmath>
#include <string>

#include "gscollab/bytes.hpp"

namespace gscollab {

std::array<std::uint32_t, 3> GridGeometry::coords(std::size_t index) const {
  const auto iz = static_cast<std::uint32_t>(index % dims[2]);
  index /= dims[2];
  const auto iy = static_cast<std::uint32_t>(index % dims[1]);
  const auto ix = static_cast<std::uint32_t>(index / dims[1]);
  return {ix, iy, iz};
}

Roi GridGeometry::bounds() const {
  Roi roi;
  for (int i = 0; i < 3; ++i) {
    roi.half_extents[i] = 0.5 * dims[i] * voxel_size;
    roi.center[i] = origin[i] + roi.half_extents[i];
  }
  return roi;
}

void GridGeometry::validate() const {
  if (!(voxel_size > 0.0) || !std::isfinite(voxel_size)) throw InvalidArgument("grid: voxel_size must be positive");
  for (auto d : dims)
    if (d == 0) throw InvalidArgument("grid: dims must be positive");
  for (double o : origin)
    if (!std::isfinite(o)) throw InvalidArgument("grid: origin must be finite");
}

namespace {

void put_header(ByteWriter& w, const GridGeometry& g, std::uint8_t kind) {
  w.put_bytes("VOXG");
  w.put_u32(kVoxgVersion);
  w.put_u32(g.dims[0]);
  w.put_u32(g.dims[1]);
  w.put_u32(g.dims[2]);
  w.put_u32(static_cast<std::uint32_t>(kNumClasses));
  for (double o : g.origin) w.put_f32(static_cast<float>(o));
  w.put_f32(static_cast<float>(g.voxel_size));
  w.put_u8(kind);
}

}  // namespace

std::vector<std::uint8_t> encode_voxg(const ChannelGrid& grid) {
  ByteWriter w;
  put_header(w, grid.geometry, 0);
  for (double v : grid.values) w.put_f32(static_cast<float>(v));
  return std::move(w).take();
}

std::vector<std::uint8_t> encode_voxg(const LabelGrid& grid) {
  ByteWriter w;
  put_header(w, grid.geometry, 1);
  for (std::uint8_t l : grid.labels) w.put_u8(l);
  return std::move(w).take();
}

VoxgContent decode_voxg(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (!r.take_magic("VOXG")) throw DecodeError(DecodeFailure::BadMagic, "voxg: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kVoxgVersion) {
    throw DecodeError(DecodeFailure::VersionMismatch, "voxg: unsupported version " + std::to_string(version));
  }
  GridGeometry g;
  for (auto& d : g.dims) d = r.u32();
  const std::uint32_t channels = r.u32();
  for (auto& o : g.origin) o = r.f32();
  g.voxel_size = r.f32();
  const std::uint8_t kind = r.u8();
  if (channels != kNumClasses) throw DecodeError(DecodeFailure::BadField, "voxg: unexpected channel count");
  try {
    g.validate();
  } catch (const InvalidArgument& e) {
    throw DecodeError(DecodeFailure::BadField, std::string("voxg: ") + e.what());
  }
  const std::size_t n = g.num_voxels();
  if (kind == 0) {
    r.need(n * kNumClasses * 4, "channel payload");
    ChannelGrid out(g);
    for (auto& v : out.values) {
      const float f = r.f32();
      if (!std::isfinite(f)) throw DecodeError(DecodeFailure::NonFinite, "voxg: non-finite channel value");
      v = f;
    }
    if (r.remaining() != 0) throw DecodeError(DecodeFailure::TrailingBytes, "voxg: trailing bytes");
    return out;
  }
  if (kind == 1) {
    r.need(n, "label payload");
    LabelGrid out(g);
    for (auto& l : out.labels) {
      l = r.u8();
      if (l >= kNumClasses) throw DecodeError(DecodeFailure::BadField, "voxg: label out of range");
    }
    if (r.remaining() != 0) throw DecodeError(DecodeFailure::TrailingBytes, "voxg: trailing bytes");
    return out;
  }
  throw DecodeError(DecodeFailure::BadField, "voxg: unknown payload kind");
}

}  // namespace gscollab
