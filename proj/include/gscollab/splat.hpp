#pragma once

#include <span>

#include "gscollab/core.hpp"
#include "gscollab/voxel_grid.hpp"

namespace gscollab {

struct SplatConfig {
  /// Mahalanobis radius beyond which a Gaussian contributes nothing.
  double truncation_sigma = 3.0;
  /// Channel floor used when decoding labels: voxels whose channels are all
  /// below it are labeled empty.
  double min_contribution = 1e-4;

  void validate() const;
};

/// Additive Gaussian-to-voxel splatting: every voxel accumulates the density
/// of each Gaussian at the voxel center, for Gaussians whose truncation
/// ellipsoid (Mahalanobis <= truncation_sigma) contains that center.
/// Accumulation runs in ascending Gaussian index order.
ChannelGrid splat(std::span<const SemanticGaussian> gaussians, const GridGeometry& geometry,
                  const SplatConfig& cfg = {});

/// Adds the contributions of `gaussians` into an existing channel grid.
void splat_into(std::span<const SemanticGaussian> gaussians, const SplatConfig& cfg, ChannelGrid& out);

/// Per-voxel argmax, ties to the lowest class; all-below-floor voxels are empty.
LabelGrid labels_from_channels(const ChannelGrid& grid, double min_contribution = 1e-4);

/// Gradient of a scalar loss with respect to one Gaussian's attributes. The
/// rotation entry is the derivative with respect to the unit quaternion's
/// components as they enter the rotation-matrix formula.
struct GaussianGrad {
  Vec3 mean{};
  Vec3 scale{};
  Quat rotation{0.0, 0.0, 0.0, 0.0};
  double opacity = 0.0;
  Semantics semantics{};
};

/// Vector-Jacobian product of `splat`: given dL/d(channels), accumulates
/// dL/d(attributes) for each Gaussian into `grads` (same length as input).
/// The truncation support is treated as fixed.
void splat_backward(std::span<const SemanticGaussian> gaussians, const GridGeometry& geometry,
                    const SplatConfig& cfg, std::span<const double> grad_channels, std::span<GaussianGrad> grads);

/// dL/dq given dL/dR for R = quat_to_rotmat(q).
Quat rotmat_vjp(const Quat& q, const Mat3& grad_r);

}  // namespace gscollab
