#include "gscollab/core.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gscollab {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::DegenerateGaussian: return "degenerate-gaussian";
    case ErrorCode::DecodeError: return "decode-error";
    case ErrorCode::InvalidLabel: return "invalid-label";
    case ErrorCode::InvalidParams: return "invalid-params";
    case ErrorCode::StateError: return "state-error";
    case ErrorCode::SpecError: return "spec-error";
    case ErrorCode::ConfigError: return "config-error";
    case ErrorCode::Divergence: return "divergence";
    case ErrorCode::Io: return "io-error";
  }
  return "unknown";
}

const char* to_string(DecodeFailure f) noexcept {
  switch (f) {
    case DecodeFailure::BadMagic: return "bad-magic";
    case DecodeFailure::VersionMismatch: return "version-mismatch";
    case DecodeFailure::Truncated: return "truncated";
    case DecodeFailure::NonFinite: return "non-finite";
    case DecodeFailure::BadField: return "bad-field";
    case DecodeFailure::TrailingBytes: return "trailing-bytes";
  }
  return "unknown";
}

double Quat::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Quat quat_multiply(const Quat& a, const Quat& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Quat quat_conjugate(const Quat& q) { return {q.w, -q.x, -q.y, -q.z}; }

Quat quat_from_axis_angle(const Vec3& axis, double angle) {
  const double n = std::sqrt(dot(axis, axis));
  if (!(n > 0.0)) throw InvalidArgument("quat_from_axis_angle: zero axis");
  const double s = std::sin(0.5 * angle) / n;
  return canonicalize_quaternion({std::cos(0.5 * angle), axis[0] * s, axis[1] * s, axis[2] * s});
}

Quat canonicalize_quaternion(const Quat& q) {
  const double n = q.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw InvalidArgument("canonicalize_quaternion: zero or non-finite quaternion");
  Quat u{q.w / n, q.x / n, q.y / n, q.z / n};
  double lead = u.w;
  if (lead == 0.0) lead = u.x != 0.0 ? u.x : (u.y != 0.0 ? u.y : u.z);
  if (lead < 0.0) u = -u;
  return u;
}

Mat3 quat_to_rotmat(const Quat& q) {
  const double n = q.norm();
  if (!(std::abs(n - 1.0) <= 1e-6)) {
    throw InvalidArgument("quat_to_rotmat: quaternion norm " + std::to_string(n) + " is not unit");
  }
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  return {{{1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)},
           {2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)},
           {2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)}}};
}

Vec3 matvec(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
          m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
          m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

Vec3 matvec_transposed(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
          m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
          m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2]};
}

Mat3 matmul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
  return r;
}

Mat3 transpose(const Mat3& m) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i][j] = m[j][i];
  return r;
}

bool is_valid(const SemanticGaussian& g) noexcept {
  try {
    validate(g);
    return true;
  } catch (const Error&) {
    return false;
  }
}

void validate(const SemanticGaussian& g) {
  for (double v : g.mean)
    if (!std::isfinite(v)) throw InvalidArgument("gaussian: non-finite mean");
  for (double v : g.scale)
    if (!(v > 0.0) || !std::isfinite(v)) throw InvalidArgument("gaussian: scale must be positive and finite");
  const Quat& r = g.rotation;
  if (!(std::abs(r.norm() - 1.0) <= 1e-6)) throw InvalidArgument("gaussian: rotation is not unit norm");
  if (r.w < 0.0) throw InvalidArgument("gaussian: rotation scalar part is negative");
  if (!(g.opacity >= 0.0 && g.opacity <= 1.0)) throw InvalidArgument("gaussian: opacity outside [0,1]");
  for (double v : g.semantics)
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("gaussian: semantics must be finite and non-negative");
}

Mat3 covariance(const SemanticGaussian& g) {
  const Mat3 r = quat_to_rotmat(g.rotation);
  Mat3 sigma{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += r[i][k] * g.scale[k] * g.scale[k] * r[j][k];
      sigma[i][j] = acc;
    }
  return sigma;
}

namespace {

constexpr double kMaxCondition = 1e12;

void check_condition(const SemanticGaussian& g) {
  const auto [lo, hi] = std::minmax({g.scale[0], g.scale[1], g.scale[2]});
  if (!(lo > 0.0) || (hi * hi) / (lo * lo) > kMaxCondition) {
    throw DegenerateGaussian("gaussian covariance condition number exceeds 1e12");
  }
}

// Lower-triangular Cholesky factor; returns false on a non-positive pivot.
bool cholesky(const Mat3& a, Mat3& l) {
  l = {};
  for (int j = 0; j < 3; ++j) {
    double d = a[j][j];
    for (int k = 0; k < j; ++k) d -= l[j][k] * l[j][k];
    if (!(d > 0.0)) return false;
    l[j][j] = std::sqrt(d);
    for (int i = j + 1; i < 3; ++i) {
      double s = a[i][j];
      for (int k = 0; k < j; ++k) s -= l[i][k] * l[j][k];
      l[i][j] = s / l[j][j];
    }
  }
  return true;
}

Mat3 factor(const SemanticGaussian& g) {
  check_condition(g);
  Mat3 sigma = covariance(g);
  Mat3 l;
  if (cholesky(sigma, l)) return l;
  const double jitter = 1e-12 * (sigma[0][0] + sigma[1][1] + sigma[2][2]);
  for (int i = 0; i < 3; ++i) sigma[i][i] += jitter;
  if (cholesky(sigma, l)) return l;
  throw DegenerateGaussian("gaussian covariance is not positive definite");
}

// Solves L y = d by forward substitution.
Vec3 forward_solve(const Mat3& l, const Vec3& d) {
  Vec3 y{};
  y[0] = d[0] / l[0][0];
  y[1] = (d[1] - l[1][0] * y[0]) / l[1][1];
  y[2] = (d[2] - l[2][0] * y[0] - l[2][1] * y[1]) / l[2][2];
  return y;
}

}  // namespace

Mat3 precision_matrix(const SemanticGaussian& g) {
  const Mat3 l = factor(g);
  // Columns of L^-1, then Sigma^-1 = L^-T L^-1.
  Mat3 linv{};
  for (int c = 0; c < 3; ++c) {
    Vec3 e{};
    e[c] = 1.0;
    const Vec3 col = forward_solve(l, e);
    for (int r = 0; r < 3; ++r) linv[r][c] = col[r];
  }
  Mat3 p{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += linv[k][i] * linv[k][j];
      p[i][j] = acc;
    }
  // Symmetrize away rounding asymmetry.
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j) p[i][j] = p[j][i] = 0.5 * (p[i][j] + p[j][i]);
  return p;
}

double mahalanobis_sq(const SemanticGaussian& g, const Vec3& x) {
  const Mat3 l = factor(g);
  const Vec3 y = forward_solve(l, x - g.mean);
  return dot(y, y);
}

Semantics density(const SemanticGaussian& g, const Vec3& x) {
  const double q = mahalanobis_sq(g, x);
  const double w = g.opacity * std::exp(-0.5 * q);
  Semantics out{};
  for (std::size_t c = 0; c < kNumClasses; ++c) out[c] = w * g.semantics[c];
  return out;
}

RigidTransform RigidTransform::from_yaw(double yaw, const Vec3& translation) {
  return {quat_from_axis_angle({0.0, 0.0, 1.0}, yaw), translation};
}

Vec3 RigidTransform::rotate(const Vec3& v) const { return matvec(quat_to_rotmat(rotation), v); }

Vec3 RigidTransform::apply(const Vec3& p) const { return rotate(p) + translation; }

RigidTransform RigidTransform::inverse() const {
  const Quat inv = canonicalize_quaternion(quat_conjugate(rotation));
  const Vec3 t = matvec_transposed(quat_to_rotmat(rotation), translation);
  return {inv, {-t[0], -t[1], -t[2]}};
}

RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
  return {canonicalize_quaternion(quat_multiply(a.rotation, b.rotation)), a.apply(b.translation)};
}

bool Roi::contains(const Vec3& p) const {
  for (int i = 0; i < 3; ++i) {
    if (p[i] < center[i] - half_extents[i] || p[i] > center[i] + half_extents[i]) return false;
  }
  return true;
}

}  // namespace gscollab
