#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

#include "gscollab/error.hpp"

namespace gscollab {

// 12 semantic classes plus the empty class in the last channel.
inline constexpr std::size_t kNumClasses = 13;
inline constexpr std::uint8_t kEmptyClass = kNumClasses - 1;

// Semantic class ids used by the simulator and the BEV category map.
namespace cls {
inline constexpr std::uint8_t kBuilding = 0;
inline constexpr std::uint8_t kFence = 1;
inline constexpr std::uint8_t kTerrain = 2;
inline constexpr std::uint8_t kPole = 3;
inline constexpr std::uint8_t kRoad = 4;
inline constexpr std::uint8_t kSidewalk = 5;
inline constexpr std::uint8_t kVegetation = 6;
inline constexpr std::uint8_t kVehicle = 7;
inline constexpr std::uint8_t kWall = 8;
inline constexpr std::uint8_t kTrafficSign = 9;
inline constexpr std::uint8_t kPedestrian = 10;
inline constexpr std::uint8_t kOther = 11;
}  // namespace cls

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;
using Semantics = std::array<double, kNumClasses>;

/// Quaternion stored as (w, x, y, z).
struct Quat {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static constexpr Quat identity() { return {1.0, 0.0, 0.0, 0.0}; }
  double norm() const;
  double dot(const Quat& o) const { return w * o.w + x * o.x + y * o.y + z * o.z; }
  Quat operator-() const { return {-w, -x, -y, -z}; }
  friend bool operator==(const Quat&, const Quat&) = default;
};

Quat quat_multiply(const Quat& a, const Quat& b);
Quat quat_conjugate(const Quat& q);
Quat quat_from_axis_angle(const Vec3& axis, double angle);

/// Unit-normalizes and applies the sign convention w >= 0; when w == 0 the
/// first nonzero of (x, y, z) is made positive. Throws on a zero quaternion.
Quat canonicalize_quaternion(const Quat& q);

/// Rotation matrix of a unit quaternion (|q| within 1e-6 of 1).
Mat3 quat_to_rotmat(const Quat& q);

struct SemanticGaussian {
  Vec3 mean{};
  Vec3 scale{1.0, 1.0, 1.0};
  Quat rotation{};
  double opacity = 1.0;
  Semantics semantics{};

  friend bool operator==(const SemanticGaussian&, const SemanticGaussian&) = default;
};

/// Throws InvalidArgument if any invariant (unit canonical rotation,
/// positive scale, opacity in [0,1], non-negative finite semantics) fails.
void validate(const SemanticGaussian& g);
bool is_valid(const SemanticGaussian& g) noexcept;

/// Sigma = R S S^T R^T.
Mat3 covariance(const SemanticGaussian& g);

/// Inverse covariance from a Cholesky factorization of Sigma, with a 1e-12
/// diagonal jitter retry. Throws DegenerateGaussian when cond(Sigma) > 1e12.
Mat3 precision_matrix(const SemanticGaussian& g);

/// Squared Mahalanobis distance of x from the Gaussian's mean.
double mahalanobis_sq(const SemanticGaussian& g, const Vec3& x);

/// a * exp(-0.5 (x-m)^T Sigma^-1 (x-m)) * c.
Semantics density(const SemanticGaussian& g, const Vec3& x);

struct RigidTransform {
  Quat rotation{};
  Vec3 translation{};

  static RigidTransform identity() { return {}; }
  static RigidTransform from_yaw(double yaw, const Vec3& translation);

  Vec3 apply(const Vec3& p) const;
  Vec3 rotate(const Vec3& v) const;
  Mat3 matrix() const { return quat_to_rotmat(rotation); }
  RigidTransform inverse() const;

  /// (a * b)(x) = a(b(x)).
  friend RigidTransform operator*(const RigidTransform& a, const RigidTransform& b);
};

/// Axis-aligned box in the owning agent's frame; membership is inclusive.
struct Roi {
  Vec3 center{};
  Vec3 half_extents{20.0, 20.0, 1.6};

  bool contains(const Vec3& p) const;
};

// Small vector helpers used throughout.
inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
Vec3 matvec(const Mat3& m, const Vec3& v);
Vec3 matvec_transposed(const Mat3& m, const Vec3& v);
Mat3 matmul(const Mat3& a, const Mat3& b);
Mat3 transpose(const Mat3& m);

}  // namespace gscollab
