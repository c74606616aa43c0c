#pragma once

// Independent reference computations used by the unit tests and the
// acceptance runner. None of these call into the library code they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#include "gscollab/core.hpp"
#include "gscollab/voxel_grid.hpp"

namespace oracle {

using gscollab::Mat3;
using gscollab::Vec3;
using gscollab::Quat;
using gscollab::SemanticGaussian;
using gscollab::GridGeometry;
using gscollab::kNumClasses;

// Inverse by cofactors.
inline Mat3 inverse_3x3(const Mat3& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  Mat3 inv{};
  inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return inv;
}

// Textbook quaternion-to-matrix formula.
inline Mat3 rotmat(const Quat& q) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
           {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
           {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

// Sigma as sum_k s_k^2 r_k r_k^T over the columns of R.
inline Mat3 sigma(const SemanticGaussian& g) {
  const Mat3 r = rotmat(g.rotation);
  Mat3 s{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) s[i][j] += g.scale[k] * g.scale[k] * r[i][k] * r[j][k];
  return s;
}

inline double mahal_sq(const SemanticGaussian& g, const Vec3& x) {
  const Mat3 inv = inverse_3x3(sigma(g));
  const Vec3 d{x[0] - g.mean[0], x[1] - g.mean[1], x[2] - g.mean[2]};
  double q = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) q += d[i] * inv[i][j] * d[j];
  return q;
}

inline double density(const SemanticGaussian& g, const Vec3& x, std::size_t c) {
  return g.opacity * std::exp(-0.5 * mahal_sq(g, x)) * g.semantics[c];
}

// Untruncated splat: every (voxel, Gaussian) pair.
inline std::vector<double> dense_splat(const std::vector<SemanticGaussian>& gs, const GridGeometry& geo) {
  std::vector<double> out(geo.num_voxels() * kNumClasses, 0.0);
  for (std::uint32_t x = 0; x < geo.dims[0]; ++x)
    for (std::uint32_t y = 0; y < geo.dims[1]; ++y)
      for (std::uint32_t z = 0; z < geo.dims[2]; ++z) {
        const Vec3 c{geo.origin[0] + (x + 0.5) * geo.voxel_size, geo.origin[1] + (y + 0.5) * geo.voxel_size,
                     geo.origin[2] + (z + 0.5) * geo.voxel_size};
        const std::size_t v = (std::size_t{x} * geo.dims[1] + y) * geo.dims[2] + z;
        for (const auto& g : gs) {
          const double w = g.opacity * std::exp(-0.5 * mahal_sq(g, c));
          for (std::size_t k = 0; k < kNumClasses; ++k) out[v * kNumClasses + k] += w * g.semantics[k];
        }
      }
  return out;
}

// Indices of points within rho of q, nearest first (ties by index), capped.
inline std::vector<std::uint32_t> linear_scan(const std::vector<Vec3>& pts, const Vec3& q, double rho,
                                              std::size_t cap) {
  std::vector<std::pair<double, std::uint32_t>> hits;
  for (std::uint32_t i = 0; i < pts.size(); ++i) {
    const double dx = pts[i][0] - q[0], dy = pts[i][1] - q[1], dz = pts[i][2] - q[2];
    const double d2 = dx * dx + dy * dy + dz * dz;
    if (d2 <= rho * rho) hits.emplace_back(d2, i);
  }
  std::sort(hits.begin(), hits.end());
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < std::min(cap, hits.size()); ++i) out.push_back(hits[i].second);
  return out;
}

// Little-endian field writers for hand-assembled byte goldens.
inline void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_f32(std::vector<std::uint8_t>& b, float f) {
  std::uint32_t v = 0;
  static_assert(sizeof v == sizeof f);
  std::memcpy(&v, &f, sizeof v);
  put_u32(b, v);
}

// IEEE half from float, round to nearest even (independent of any F16C path).
inline std::uint16_t half_bits(float f) {
  std::uint32_t x = 0;
  std::memcpy(&x, &f, 4);
  const std::uint32_t sign = (x >> 16) & 0x8000u;
  const int exp = static_cast<int>((x >> 23) & 0xff);
  std::uint32_t mant = x & 0x7fffffu;
  if (exp == 0xff) return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0u));
  const int e = exp - 127 + 15;
  if (e >= 31) return static_cast<std::uint16_t>(sign | 0x7c00u);
  if (e <= 0) {
    if (e < -10) return static_cast<std::uint16_t>(sign);
    mant |= 0x800000u;
    const int shift = 14 - e;
    std::uint32_t h = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1);
    const std::uint32_t half = 1u << (shift - 1);
    if (rem > half || (rem == half && (h & 1u))) ++h;
    return static_cast<std::uint16_t>(sign | h);
  }
  std::uint32_t h = (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
  return static_cast<std::uint16_t>(sign | h);
}

inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (h & 0x8000u) << 16;
  const std::uint32_t e = (h >> 10) & 0x1f, m = h & 0x3ffu;
  float v;
  if (e == 0) {
    v = std::ldexp(static_cast<float>(m), -24);
  } else if (e == 31) {
    v = m ? std::nanf("") : INFINITY;
  } else {
    v = std::ldexp(static_cast<float>(m | 0x400u), static_cast<int>(e) - 25);
  }
  std::uint32_t bits = 0;
  std::memcpy(&bits, &v, 4);
  bits |= sign;
  std::memcpy(&v, &bits, 4);
  return v;
}

// FNV-1a over bytes, for golden fingerprints.
inline std::uint64_t fnv1a(const std::vector<std::uint8_t>& b) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t c : b) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace oracle
