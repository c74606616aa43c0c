#include "gscollab/splat.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "gscollab/kernels/kernels.hpp"

namespace gscollab {

void SplatConfig::validate() const {
  if (!(truncation_sigma > 0.0)) throw InvalidArgument("splat: truncation_sigma must be positive");
  if (!(min_contribution >= 0.0)) throw InvalidArgument("splat: min_contribution must be non-negative");
}

namespace {

struct IndexRange {
  std::uint32_t lo = 0;
  std::uint32_t hi = 0;  // exclusive
  bool empty() const { return hi <= lo; }
};

// Voxel indices along one axis whose centers lie within [lo, hi].
IndexRange centers_within(double lo, double hi, double origin, double voxel, std::uint32_t dim) {
  const double first = std::ceil((lo - origin) / voxel - 0.5);
  const double last = std::floor((hi - origin) / voxel - 0.5);
  if (last < 0.0 || first > static_cast<double>(dim) - 1.0 || last < first) return {};
  return {static_cast<std::uint32_t>(std::max(first, 0.0)),
          static_cast<std::uint32_t>(std::min(last, static_cast<double>(dim) - 1.0)) + 1};
}

// Visits every row (fixed iy, iz; contiguous ix) that can hold a center
// within the truncation ellipsoid.
template <typename RowFn>
void for_each_row(const SemanticGaussian& g, const Mat3& p, const GridGeometry& geo, double tau, RowFn&& fn) {
  const Mat3 sigma = covariance(g);
  IndexRange r[3];
  for (int a = 0; a < 3; ++a) {
    const double half = tau * std::sqrt(sigma[a][a]);
    r[a] = centers_within(g.mean[a] - half, g.mean[a] + half, geo.origin[a], geo.voxel_size, geo.dims[a]);
    if (r[a].empty()) return;
  }
  const double cutoff = tau * tau;
  kernels::RowQuadratic row;
  row.q2 = p[0][0];
  row.step = geo.voxel_size;
  row.cutoff_sq = cutoff;
  row.t0 = geo.origin[0] + (r[0].lo + 0.5) * geo.voxel_size - g.mean[0];
  const std::uint32_t count = r[0].hi - r[0].lo;
  for (std::uint32_t iy = r[1].lo; iy < r[1].hi; ++iy) {
    const double dy = geo.origin[1] + (iy + 0.5) * geo.voxel_size - g.mean[1];
    for (std::uint32_t iz = r[2].lo; iz < r[2].hi; ++iz) {
      const double dz = geo.origin[2] + (iz + 0.5) * geo.voxel_size - g.mean[2];
      row.q0 = p[1][1] * dy * dy + 2.0 * p[1][2] * dy * dz + p[2][2] * dz * dz;
      row.q1 = 2.0 * (p[0][1] * dy + p[0][2] * dz);
      // Minimum of the row quadratic over the whole line.
      if (row.q0 - row.q1 * row.q1 / (4.0 * row.q2) > cutoff) continue;
      fn(r[0].lo, count, iy, iz, dy, dz, row);
    }
  }
}

}  // namespace

void splat_into(std::span<const SemanticGaussian> gaussians, const SplatConfig& cfg, ChannelGrid& out) {
  cfg.validate();
  const GridGeometry& geo = out.geometry;
  geo.validate();
  const auto& k = kernels::active();
  std::vector<double> weights(geo.dims[0]);
  for (const SemanticGaussian& g : gaussians) {
    if (g.opacity == 0.0) continue;
    const Mat3 p = precision_matrix(g);
    for_each_row(g, p, geo, cfg.truncation_sigma,
                 [&](std::uint32_t ix0, std::uint32_t n, std::uint32_t iy, std::uint32_t iz, double, double,
                     kernels::RowQuadratic row) {
                   row.amplitude = g.opacity;
                   k.gaussian_row(row, n, weights.data());
                   for (std::uint32_t i = 0; i < n; ++i) {
                     if (weights[i] == 0.0) continue;
                     double* dst = out.values.data() + geo.index(ix0 + i, iy, iz) * kNumClasses;
                     k.axpy(kNumClasses, weights[i], g.semantics.data(), dst);
                   }
                 });
  }
}

ChannelGrid splat(std::span<const SemanticGaussian> gaussians, const GridGeometry& geometry, const SplatConfig& cfg) {
  geometry.validate();
  ChannelGrid out(geometry);
  splat_into(gaussians, cfg, out);
  return out;
}

LabelGrid labels_from_channels(const ChannelGrid& grid, double min_contribution) {
  LabelGrid out(grid.geometry);
  const std::size_t n = grid.geometry.num_voxels();
  for (std::size_t v = 0; v < n; ++v) {
    const double* ch = grid.values.data() + v * kNumClasses;
    std::size_t best = 0;
    for (std::size_t c = 1; c < kNumClasses; ++c)
      if (ch[c] > ch[best]) best = c;
    out.labels[v] = ch[best] < min_contribution ? kEmptyClass : static_cast<std::uint8_t>(best);
  }
  return out;
}

Quat rotmat_vjp(const Quat& q, const Mat3& g) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Quat d{0.0, 0.0, 0.0, 0.0};
  d.w = 2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
  d.x = 2.0 * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2] + z * g[2][0] +
               w * g[2][1] - 2.0 * x * g[2][2]);
  d.y = 2.0 * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] +
               z * g[2][1] - 2.0 * y * g[2][2]);
  d.z = 2.0 * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1] + y * g[1][2] +
               x * g[2][0] + y * g[2][1]);
  return d;
}

void splat_backward(std::span<const SemanticGaussian> gaussians, const GridGeometry& geo, const SplatConfig& cfg,
                    std::span<const double> grad_channels, std::span<GaussianGrad> grads) {
  cfg.validate();
  geo.validate();
  if (grad_channels.size() != geo.num_voxels() * kNumClasses) {
    throw InvalidArgument("splat_backward: gradient buffer does not match grid");
  }
  if (grads.size() != gaussians.size()) throw InvalidArgument("splat_backward: gradient span size mismatch");
  const auto& k = kernels::active();
  std::vector<double> expo(geo.dims[0]);
  for (std::size_t gi = 0; gi < gaussians.size(); ++gi) {
    const SemanticGaussian& g = gaussians[gi];
    GaussianGrad& out = grads[gi];
    const Mat3 p = precision_matrix(g);
    // dL/dP = sum dq * d d^T and sum dq * d, accumulated over the support.
    Mat3 m{};
    Vec3 sd{};
    for_each_row(g, p, geo, cfg.truncation_sigma,
                 [&](std::uint32_t ix0, std::uint32_t n, std::uint32_t iy, std::uint32_t iz, double dy, double dz,
                     kernels::RowQuadratic row) {
                   row.amplitude = 1.0;
                   k.gaussian_row(row, n, expo.data());
                   for (std::uint32_t i = 0; i < n; ++i) {
                     const double e = expo[i];
                     if (e == 0.0) continue;
                     const double* gch = grad_channels.data() + geo.index(ix0 + i, iy, iz) * kNumClasses;
                     const double gdot = k.dot(kNumClasses, gch, g.semantics.data());
                     const double w = g.opacity * e;
                     k.axpy(kNumClasses, w, gch, out.semantics.data());
                     out.opacity += e * gdot;
                     const double dq = -0.5 * w * gdot;
                     if (dq == 0.0) continue;
                     const Vec3 d{row.t0 + i * row.step, dy, dz};
                     for (int a = 0; a < 3; ++a) {
                       sd[a] += dq * d[a];
                       for (int b = 0; b < 3; ++b) m[a][b] += dq * d[a] * d[b];
                     }
                   }
                 });
    // q = d^T P d with d = x - m and P = R diag(1/s^2) R^T.
    const Vec3 gm = matvec(p, sd);
    for (int a = 0; a < 3; ++a) out.mean[a] += -2.0 * gm[a];
    const Mat3 r = quat_to_rotmat(g.rotation);
    const Mat3 rtmr = matmul(transpose(r), matmul(m, r));
    Mat3 grad_r{};
    for (int i = 0; i < 3; ++i)
      for (int a = 0; a < 3; ++a) {
        double acc = 0.0;
        for (int b = 0; b < 3; ++b) acc += m[i][b] * r[b][a];
        grad_r[i][a] = 2.0 * acc / (g.scale[a] * g.scale[a]);
      }
    for (int a = 0; a < 3; ++a) out.scale[a] += -2.0 * rtmr[a][a] / (g.scale[a] * g.scale[a] * g.scale[a]);
    const Quat gq = rotmat_vjp(g.rotation, grad_r);
    out.rotation.w += gq.w;
    out.rotation.x += gq.x;
    out.rotation.y += gq.y;
    out.rotation.z += gq.z;
  }
}

}  // namespace gscollab
