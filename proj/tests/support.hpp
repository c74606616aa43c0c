#pragma once

// Random generators and small helpers shared by the unit tests.

#include <cmath>
#include <vector>

#include "gscollab/core.hpp"
#include "gscollab/rng.hpp"

namespace testutil {

using namespace gscollab;

inline Quat random_quat(Rng& rng) {
  Quat q{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
  return canonicalize_quaternion(q);
}

inline Vec3 random_vec(Rng& rng, double lo, double hi) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

inline SemanticGaussian random_gaussian(Rng& rng, double extent = 2.0, double smin = 0.1, double smax = 0.8) {
  SemanticGaussian g;
  g.mean = random_vec(rng, -extent, extent);
  g.scale = random_vec(rng, smin, smax);
  g.rotation = random_quat(rng);
  g.opacity = rng.uniform(0.05, 1.0);
  for (double& c : g.semantics) c = rng.uniform(0.0, 1.5);
  return g;
}

inline RigidTransform random_transform(Rng& rng, double extent = 10.0) {
  return {random_quat(rng), random_vec(rng, -extent, extent)};
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  const double d = std::abs(a - b);
  const double s = std::max({std::abs(a), std::abs(b), floor});
  return d / s;
}

}  // namespace testutil
