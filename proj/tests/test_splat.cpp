#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "gscollab/comms.hpp"
#include "gscollab/kernels/kernels.hpp"
#include "gscollab/splat.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace gscollab;
using namespace testutil;

namespace {

GridGeometry small_grid(std::uint32_t x, std::uint32_t y, std::uint32_t z, double voxel = 0.4) {
  GridGeometry g;
  g.dims = {x, y, z};
  g.voxel_size = voxel;
  g.origin = {-0.5 * x * voxel, -0.5 * y * voxel, -0.5 * z * voxel};
  return g;
}

std::vector<SemanticGaussian> random_set(Rng& rng, std::size_t n, double extent) {
  std::vector<SemanticGaussian> gs;
  for (std::size_t i = 0; i < n; ++i) gs.push_back(random_gaussian(rng, extent, 0.1, 0.6));
  return gs;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_SUITE("splat") {

TEST_CASE("empty input gives a zero grid and empty labels") {
  const GridGeometry geo = small_grid(6, 5, 4);
  const ChannelGrid ch = splat({}, geo);
  CHECK(std::all_of(ch.values.begin(), ch.values.end(), [](double v) { return v == 0.0; }));
  const LabelGrid l = labels_from_channels(ch);
  CHECK(std::all_of(l.labels.begin(), l.labels.end(), [](std::uint8_t v) { return v == kEmptyClass; }));
}

TEST_CASE("a unit Gaussian on a voxel center peaks there") {
  const GridGeometry geo = small_grid(9, 9, 5);
  SemanticGaussian g;
  g.mean = geo.voxel_center(4, 3, 2);
  g.scale = {geo.voxel_size, geo.voxel_size, geo.voxel_size};
  g.semantics[7] = 1.0;
  const ChannelGrid ch = splat(std::vector{g}, geo);
  const std::size_t v = geo.index(4, 3, 2);
  CHECK(ch.at(v, 7) == 1.0);
  CHECK(*std::max_element(ch.values.begin(), ch.values.end()) == 1.0);
  CHECK(labels_from_channels(ch).labels[v] == 7);
}

TEST_CASE("truncated splat matches the dense oracle") {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const GridGeometry geo = small_grid(10, 10, 4);
    const auto gs = random_set(rng, 50, 1.8);
    SplatConfig cfg;
    cfg.truncation_sigma = 6.0;
    const ChannelGrid ch = splat(gs, geo, cfg);
    CHECK(max_abs_diff(ch.values, oracle::dense_splat(gs, geo)) <= 1e-4);
  }
}

TEST_CASE("label decoding rules") {
  ChannelGrid ch(small_grid(3, 1, 1));
  ch.values[0 * kNumClasses + 0] = 0.2;
  ch.values[0 * kNumClasses + 1] = 0.9;
  ch.values[1 * kNumClasses + 0] = 0.5;
  ch.values[1 * kNumClasses + 1] = 0.5;
  ch.values[2 * kNumClasses + 4] = 5e-5;
  const LabelGrid l = labels_from_channels(ch);
  CHECK(l.labels[0] == 1);
  CHECK(l.labels[1] == 0);
  CHECK(l.labels[2] == kEmptyClass);
  CHECK(labels_from_channels(ch, 1e-5).labels[2] == 4);
}

TEST_CASE("splatting is additive and order independent") {
  Rng rng(22);
  const GridGeometry geo = small_grid(12, 10, 6);
  const auto a = random_set(rng, 40, 2.0), b = random_set(rng, 30, 2.0);
  std::vector<SemanticGaussian> both = a;
  both.insert(both.end(), b.begin(), b.end());
  const ChannelGrid sa = splat(a, geo), sb = splat(b, geo), sab = splat(both, geo);
  for (std::size_t i = 0; i < sab.values.size(); ++i) CHECK(std::abs(sab.values[i] - sa.values[i] - sb.values[i]) <= 1e-6);

  std::vector<SemanticGaussian> shuffled = both;
  for (std::size_t i = shuffled.size() - 1; i > 0; --i) std::swap(shuffled[i], shuffled[rng.below(i + 1)]);
  CHECK(max_abs_diff(splat(shuffled, geo).values, sab.values) <= 1e-6);
  for (double v : sab.values) CHECK(v >= 0.0);
}

TEST_CASE("raising the truncation radius never lowers a channel") {
  Rng rng(23);
  const GridGeometry geo = small_grid(10, 10, 6);
  const auto gs = random_set(rng, 40, 1.8);
  std::vector<double> prev(geo.num_voxels() * kNumClasses, 0.0);
  for (double sigma : {0.5, 1.0, 2.0, 3.0, 4.5, 6.0}) {
    SplatConfig cfg;
    cfg.truncation_sigma = sigma;
    const ChannelGrid ch = splat(gs, geo, cfg);
    // Rows start at a different offset per radius, so equal terms may differ in the last ulp.
    for (std::size_t i = 0; i < prev.size(); ++i) CHECK(ch.values[i] >= prev[i] * (1.0 - 1e-12));
    prev = ch.values;
  }
}

TEST_CASE("splatting commutes with lattice-preserving rigid motions") {
  // A quarter turn about z plus a whole-voxel translation maps the grid onto
  // another axis-aligned grid; channel values must follow the voxels.
  Rng rng(24);
  const GridGeometry geo = small_grid(8, 8, 4);
  const auto gs = random_set(rng, 30, 1.2);
  const RigidTransform t = RigidTransform::from_yaw(std::numbers::pi / 2, {0.8, -1.2, 0.4});
  std::vector<SemanticGaussian> moved;
  for (const auto& g : gs) moved.push_back(transform_gaussian(g, t));

  GridGeometry geo2 = geo;
  const Vec3 lo = t.apply(geo.origin);
  const Vec3 hi = t.apply({geo.origin[0] + 8 * 0.4, geo.origin[1] + 8 * 0.4, geo.origin[2]});
  geo2.origin = {std::min(lo[0], hi[0]), std::min(lo[1], hi[1]), lo[2]};
  SplatConfig cfg;
  cfg.truncation_sigma = 6.0;
  const ChannelGrid a = splat(gs, geo, cfg), b = splat(moved, geo2, cfg);
  for (std::size_t v = 0; v < geo.num_voxels(); ++v) {
    const Vec3 c = t.apply(geo.voxel_center(v));
    std::array<std::uint32_t, 3> idx{};
    for (int k = 0; k < 3; ++k) idx[k] = static_cast<std::uint32_t>(std::floor((c[k] - geo2.origin[k]) / 0.4));
    const std::size_t w = geo2.index(idx[0], idx[1], idx[2]);
    for (std::size_t k = 0; k < kNumClasses; ++k) CHECK(std::abs(a.at(v, k) - b.at(w, k)) <= 1e-5);
  }
}

TEST_CASE("backward pass matches finite differences") {
  Rng rng(25);
  const GridGeometry geo = small_grid(6, 6, 4);
  auto gs = random_set(rng, 4, 0.6);
  SplatConfig cfg;
  cfg.truncation_sigma = 8.0;
  std::vector<double> w(geo.num_voxels() * kNumClasses);
  for (double& x : w) x = rng.normal();
  auto loss = [&] {
    const ChannelGrid ch = splat(gs, geo, cfg);
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * ch.values[i];
    return s;
  };
  std::vector<GaussianGrad> grads(gs.size());
  splat_backward(gs, geo, cfg, w, grads);
  const double h = 1e-6;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    auto fd = [&](double& x) {
      const double x0 = x;
      x = x0 + h;
      const double p = loss();
      x = x0 - h;
      const double m = loss();
      x = x0;
      return (p - m) / (2 * h);
    };
    for (int a = 0; a < 3; ++a) {
      CHECK(rel_err(grads[i].mean[a], fd(gs[i].mean[a]), 1e-6) < 1e-5);
      CHECK(rel_err(grads[i].scale[a], fd(gs[i].scale[a]), 1e-6) < 1e-5);
    }
    CHECK(rel_err(grads[i].opacity, fd(gs[i].opacity), 1e-6) < 1e-5);
    for (std::size_t c = 0; c < kNumClasses; ++c) CHECK(rel_err(grads[i].semantics[c], fd(gs[i].semantics[c]), 1e-6) < 1e-5);
  }
}

TEST_CASE("scalar and vector kernels give the same splat") {
  if (!kernels::isa_supported(kernels::Isa::Avx2)) return;
  Rng rng(26);
  const GridGeometry geo = small_grid(20, 16, 6);
  const auto gs = random_set(rng, 200, 3.0);
  ChannelGrid a(geo), b(geo);
  {
    kernels::ScopedIsa s(kernels::Isa::Scalar);
    a = splat(gs, geo);
  }
  {
    kernels::ScopedIsa s(kernels::Isa::Avx2);
    b = splat(gs, geo);
  }
  for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(std::abs(a.values[i] - b.values[i]) <= 1e-12 * std::max(1.0, a.values[i]));
}

TEST_CASE("VOXG header and payload layout") {
  GridGeometry geo;
  geo.dims = {2, 1, 2};
  geo.origin = {-0.4, 1.0, 0.0};
  geo.voxel_size = 0.4;
  LabelGrid l(geo);
  l.labels = {3, 12, 0, 7};
  std::vector<std::uint8_t> want{'V', 'O', 'X', 'G'};
  oracle::put_u32(want, 1);
  oracle::put_u32(want, 2);
  oracle::put_u32(want, 1);
  oracle::put_u32(want, 2);
  oracle::put_u32(want, 13);
  oracle::put_f32(want, -0.4f);
  oracle::put_f32(want, 1.0f);
  oracle::put_f32(want, 0.0f);
  oracle::put_f32(want, 0.4f);
  want.push_back(1);
  CHECK(want.size() == kVoxgHeaderSize);
  want.insert(want.end(), {3, 12, 0, 7});
  CHECK(encode_voxg(l) == want);

  ChannelGrid ch(geo);
  for (std::size_t i = 0; i < ch.values.size(); ++i) ch.values[i] = 0.25 * static_cast<double>(i);
  const auto bytes = encode_voxg(ch);
  CHECK(bytes.size() == kVoxgHeaderSize + 4 * 13 * 4);
  CHECK(bytes[kVoxgHeaderSize - 1] == 0);
  std::vector<std::uint8_t> tail;
  oracle::put_f32(tail, 0.25f * 51);
  CHECK(std::equal(tail.begin(), tail.end(), bytes.end() - 4));
}

TEST_CASE("VOXG round trips and rejects malformed input") {
  Rng rng(27);
  const GridGeometry geo = small_grid(5, 4, 3);
  ChannelGrid ch = splat(random_set(rng, 20, 1.0), geo);
  for (double& v : ch.values) v = static_cast<float>(v);
  const auto bytes = encode_voxg(ch);
  const auto back = std::get<ChannelGrid>(decode_voxg(bytes));
  CHECK(back.values == ch.values);
  CHECK(back.geometry.dims == geo.dims);

  LabelGrid l = labels_from_channels(ch);
  CHECK(std::get<LabelGrid>(decode_voxg(encode_voxg(l))).labels == l.labels);

  auto expect = [](std::vector<std::uint8_t> b, DecodeFailure f) {
    try {
      decode_voxg(b);
      FAIL("decode accepted malformed bytes");
    } catch (const DecodeError& e) {
      CHECK(e.failure() == f);
    }
  };
  auto bad = bytes;
  bad[0] = 'W';
  expect(bad, DecodeFailure::BadMagic);
  bad = bytes;
  bad[4] = 2;
  expect(bad, DecodeFailure::VersionMismatch);
  expect(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 1), DecodeFailure::Truncated);
  expect(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 20), DecodeFailure::Truncated);
  bad = bytes;
  bad.push_back(0);
  expect(bad, DecodeFailure::TrailingBytes);
  bad = encode_voxg(l);
  bad[kVoxgHeaderSize] = 13;
  expect(bad, DecodeFailure::BadField);
}

TEST_CASE("grid geometry helpers") {
  const GridGeometry g = GridGeometry::ego_default();
  CHECK(g.num_voxels() == 80000);
  for (std::size_t i : {std::size_t{0}, std::size_t{12345}, std::size_t{79999}}) {
    const auto c = g.coords(i);
    CHECK(g.index(c[0], c[1], c[2]) == i);
  }
  const Vec3 c0 = g.voxel_center(0, 0, 0);
  CHECK(c0[0] == doctest::Approx(-19.8));
  CHECK(c0[2] == doctest::Approx(-1.4));
  GridGeometry bad = g;
  bad.voxel_size = 0.0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = g;
  bad.dims[1] = 0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  SplatConfig cfg;
  cfg.truncation_sigma = 0.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
}

}  // TEST_SUITE
