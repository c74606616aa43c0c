#pragma once

// Small deterministic fixtures shared by the unit and acceptance tests.

#include "gscollab/learn.hpp"
#include "support.hpp"

namespace testutil {

inline GridGeometry tiny_geometry() {
  GridGeometry g;
  g.origin = {-1.6, -1.6, -0.8};
  g.voxel_size = 0.4;
  g.dims = {8, 8, 4};
  return g;
}

/// Two agents, eight Gaussians each: the ego set plus a perturbed copy
/// received from the neighbor, an empty-space extra, and random labels.
inline TrainSample gradient_fixture(std::uint64_t seed = 5) {
  Rng rng(seed);
  TrainSample s;
  for (int i = 0; i < 8; ++i) s.ego.push_back(random_gaussian(rng, 1.2, 0.2, 0.6));
  for (int i = 0; i < 8; ++i) {
    SemanticGaussian g = s.ego[i];
    g.mean = g.mean + Vec3{rng.normal(0, 0.12), rng.normal(0, 0.12), rng.normal(0, 0.12)};
    g.scale = random_vec(rng, 0.2, 0.6);
    g.rotation = random_quat(rng);
    g.opacity = rng.uniform(0.2, 0.9);
    for (double& c : g.semantics) c = rng.uniform(0.0, 1.5);
    s.received.push_back(g);
  }
  SemanticGaussian empty;
  empty.scale = {2.0, 2.0, 2.0};
  empty.semantics[kEmptyClass] = 1.0;
  s.extras.push_back(empty);
  s.target = LabelGrid(tiny_geometry());
  for (auto& l : s.target.labels) l = static_cast<std::uint8_t>(rng.below(kNumClasses));
  return s;
}

inline FusionParams gradient_params(std::uint64_t seed = 9) {
  FusionParams p = FusionParams::random(seed, 0.5);
  Rng rng(seed + 1);
  for (Tensor* t : {&p.b1, &p.b2, &p.b3}) {
    for (double& v : t->data) v = 0.1 * rng.normal();
  }
  return p;
}

inline SplatConfig gradient_splat() {
  SplatConfig c;
  c.truncation_sigma = 8.0;  // keeps the truncation boundary out of the finite differences
  return c;
}

}  // namespace testutil
