#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fixtures.hpp"
#include "gscollab/learn.hpp"

using namespace gscollab;
using namespace testutil;

namespace {

// Central difference of f at x along one coordinate.
template <typename F>
double central_diff(F&& f, double& x, double h) {
  const double x0 = x;
  x = x0 + h;
  const double fp = f();
  x = x0 - h;
  const double fm = f();
  x = x0;
  return (fp - fm) / (2.0 * h);
}

std::vector<double> random_channels(Rng& rng, std::size_t voxels, double spread) {
  std::vector<double> ch(voxels * kNumClasses);
  for (double& v : ch) v = rng.normal(0.0, spread);
  return ch;
}

}  // namespace

TEST_SUITE("learn") {

TEST_CASE("softmax rows match an exp-normalize oracle") {
  std::vector<double> equal(kNumClasses, 0.7);
  for (double p : softmax_probs(equal)) CHECK(p == doctest::Approx(1.0 / 13).epsilon(1e-12));

  std::vector<double> peaked(kNumClasses, 0.0);
  peaked[4] = 60.0;
  CHECK(softmax_probs(peaked)[4] >= 1.0 - 1e-15);

  Rng rng(3);
  const auto ch = random_channels(rng, 50, 3.0);
  const auto p = softmax_probs(ch);
  for (std::size_t v = 0; v < 50; ++v) {
    double z = 0.0, row = 0.0;
    for (std::size_t c = 0; c < kNumClasses; ++c) z += std::exp(ch[v * kNumClasses + c]);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      CHECK(std::abs(p[v * kNumClasses + c] - std::exp(ch[v * kNumClasses + c]) / z) < 1e-12);
      row += p[v * kNumClasses + c];
    }
    CHECK(std::abs(row - 1.0) < 1e-9);
  }
}

TEST_CASE("cross entropy values and gradient") {
  const std::vector<std::uint8_t> labels{0, 5, 12, 3};
  std::vector<double> onehot(labels.size() * kNumClasses, 0.0);
  for (std::size_t v = 0; v < labels.size(); ++v) onehot[v * kNumClasses + labels[v]] = 1.0;
  CHECK(cross_entropy(onehot, labels).value <= 1e-6);

  std::vector<double> uniform(labels.size() * kNumClasses, 1.0 / 13.0);
  CHECK(cross_entropy(uniform, labels).value == doctest::Approx(std::log(13.0)).epsilon(1e-12));

  std::vector<std::uint8_t> bad{13};
  std::vector<double> one(kNumClasses, 1.0 / 13.0);
  try {
    cross_entropy(one, bad);
    FAIL("expected InvalidLabel");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidLabel);
  }

  Rng rng(11);
  auto ch = random_channels(rng, 6, 2.0);
  std::vector<std::uint8_t> y(6);
  for (auto& l : y) l = static_cast<std::uint8_t>(rng.below(kNumClasses));
  const LossValue lv = cross_entropy(softmax_probs(ch), y);
  auto f = [&] { return cross_entropy(softmax_probs(ch), y).value; };
  for (std::size_t i = 0; i < ch.size(); ++i) {
    const double fd = central_diff(f, ch[i], 1e-6);
    CHECK(rel_err(lv.grad[i], fd, 1e-6) < 1e-5);
  }
}

TEST_CASE("lovasz extension equals 1 - Jaccard at every vertex of the 4-voxel cube") {
  for (unsigned truth = 0; truth < 16; ++truth) {
    for (unsigned pred = 0; pred < 16; ++pred) {
      std::vector<double> p(4);
      std::vector<std::uint8_t> t(4);
      unsigned inter = 0, uni = 0;
      for (int i = 0; i < 4; ++i) {
        const bool pi = (pred >> i) & 1u, ti = (truth >> i) & 1u;
        p[i] = pi ? 1.0 : 0.0;
        t[i] = ti ? 1 : 0;
        inter += pi && ti;
        uni += pi || ti;
      }
      const double expected = uni == 0 ? 0.0 : 1.0 - static_cast<double>(inter) / uni;
      CHECK(lovasz_class(p, t).value == expected);
    }
  }
}

TEST_CASE("lovasz softmax: perfect prediction, range and gradient") {
  const std::vector<std::uint8_t> labels{1, 1, 7, 12, 12, 0};
  std::vector<double> hard(labels.size() * kNumClasses, 0.0);
  for (std::size_t v = 0; v < labels.size(); ++v) hard[v * kNumClasses + labels[v]] = 1.0;
  CHECK(lovasz_softmax(hard, labels).loss.value == 0.0);

  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    auto ch = random_channels(rng, 6, 1.5);
    std::vector<std::uint8_t> y(6);
    for (auto& l : y) l = static_cast<std::uint8_t>(rng.below(4));
    auto probs = softmax_probs(ch);
    const LovaszResult r = lovasz_softmax(probs, y);
    CHECK(r.loss.value >= 0.0);
    CHECK(r.loss.value <= 1.0);
    auto f = [&] { return lovasz_softmax(probs, y).loss.value; };
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const double fd = central_diff(f, probs[i], 1e-7);
      CHECK(rel_err(r.loss.grad[i], fd, 1e-6) < 1e-4);
    }
  }
}

TEST_CASE("total loss composes and its channel gradient matches finite differences") {
  Rng rng(8);
  GridGeometry geo = tiny_geometry();
  geo.dims = {3, 2, 1};
  ChannelGrid pred(geo);
  for (double& v : pred.values) v = rng.normal(0.0, 1.0);
  LabelGrid target(geo);
  for (auto& l : target.labels) l = static_cast<std::uint8_t>(rng.below(3));
  std::vector<double> grad;
  const LossReport r = occupancy_loss(pred, target, &grad);
  CHECK(r.total == r.ce + r.lovasz);
  auto f = [&] { return occupancy_loss(pred, target, nullptr).total; };
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const double fd = central_diff(f, pred.values[i], 1e-6);
    CHECK(rel_err(grad[i], fd, 1e-6) < 1e-4);
  }
}

TEST_CASE("fusion backward matches finite differences on every parameter") {
  const TrainSample s = gradient_fixture();
  FusionParams params = gradient_params();
  const FusionConfig fcfg;
  const SplatConfig scfg = gradient_splat();
  FusionParams grad;
  learned_loss(s, fcfg, scfg, params, &grad);
  auto f = [&] { return learned_loss(s, fcfg, scfg, params, nullptr).total; };
  auto pt = params.tensors();
  auto gt = grad.tensors();
  double worst = 0.0;
  for (std::size_t t = 0; t < pt.size(); ++t) {
    for (std::size_t i = 0; i < pt[t]->size(); ++i) {
      const double fd = central_diff(f, pt[t]->data[i], 1e-5);
      const double e = rel_err(gt[t]->data[i], fd, 1e-5);
      worst = std::max(worst, e);
      if (e >= 1e-4) {
        INFO(FusionParams::tensor_name(t), "[", i, "] analytic=", gt[t]->data[i], " fd=", fd);
        CHECK(e < 1e-4);
      }
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("fusion backward: zero upstream gradient and dead attention path") {
  const TrainSample s = gradient_fixture();
  const FusionParams params = gradient_params();
  FusionConfig cfg;
  FusionGraph graph;
  CHECK_THROWS_AS(graph.backward({}), StateError);
  const auto fused = graph.forward(s.ego, s.received, cfg, params);
  std::vector<GaussianGrad> zero(fused.size());
  const FusionParams zero_grad = graph.backward(zero);
  for (const Tensor* t : zero_grad.tensors())
    for (double v : t->data) CHECK(v == 0.0);

  cfg.pooling = Pooling::Mean;
  FusionParams grad;
  learned_loss(s, cfg, gradient_splat(), params, &grad);
  for (double v : grad.q.data) CHECK(v == 0.0);
  for (double v : grad.k.data) CHECK(v == 0.0);
  double norm = 0.0;
  for (double v : grad.w1.data) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("calibration gradient matches finite differences") {
  const TrainSample s = gradient_fixture(17);
  CalibrationParams p;
  Rng rng(2);
  for (double& g : p.log_gain) g = rng.normal(0.0, 0.3);
  p.opacity_scale = 1.2;
  p.opacity_bias = -0.3;
  const SplatConfig scfg = gradient_splat();
  CalibrationParams grad;
  naive_loss(s, scfg, p, &grad);
  auto f = [&] { return naive_loss(s, scfg, p, nullptr).total; };
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    CHECK(rel_err(grad.log_gain[c], central_diff(f, p.log_gain[c], 1e-6), 1e-6) < 1e-4);
  }
  CHECK(rel_err(grad.opacity_scale, central_diff(f, p.opacity_scale, 1e-6), 1e-6) < 1e-4);
  CHECK(rel_err(grad.opacity_bias, central_diff(f, p.opacity_bias, 1e-6), 1e-6) < 1e-4);
}

TEST_CASE("calibration round-trips through the parameter container") {
  CalibrationParams p;
  p.log_gain[3] = 0.5;
  p.opacity_scale = 0.75;
  p.opacity_bias = -0.25;
  CHECK(decode_calibration(encode_calibration(p)) == p);
  const FusionParams f = gradient_params();
  CHECK_THROWS_AS(decode_calibration(encode_fusion_params(f)), DecodeError);
}

TEST_CASE("learning rate schedule: warmup then cosine") {
  TrainConfig cfg;
  cfg.warmup_steps = 10;
  cfg.peak_lr = 2e-4;
  CHECK(learning_rate(cfg, 0, 100) == doctest::Approx(2e-5));
  CHECK(learning_rate(cfg, 9, 100) == doctest::Approx(2e-4));
  CHECK(learning_rate(cfg, 10, 100) == doctest::Approx(2e-4));
  CHECK(learning_rate(cfg, 55, 100) == doctest::Approx(1e-4));
  CHECK(learning_rate(cfg, 100, 100) == doctest::Approx(0.0));
  for (std::size_t s = 11; s < 100; ++s) CHECK(learning_rate(cfg, s, 100) <= learning_rate(cfg, s - 1, 100));
}

TEST_CASE("AdamW step matches the published update rule") {
  TrainConfig cfg;
  cfg.weight_decay = 0.01;
  AdamW opt({2}, cfg);
  std::vector<double> x{1.0, -2.0};
  std::vector<double> g{0.5, 0.1};
  std::span<double> ps[] = {x};
  std::span<const double> gs[] = {g};
  opt.step(ps, gs, 0.1);
  // First step: m_hat = g, v_hat = g^2, so the update is sign(g) up to eps.
  CHECK(x[0] == doctest::Approx(1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0)));
  CHECK(x[1] == doctest::Approx(-2.0 - 0.1 * (0.1 / (0.1 + 1e-8) + 0.01 * -2.0)));
}

TEST_CASE("training: lr = 0 leaves params unchanged and a flat curve") {
  const TrainSample s = gradient_fixture();
  const FusionParams init = gradient_params();
  TrainConfig cfg;
  cfg.peak_lr = 0.0;
  cfg.epochs = 3;
  const auto res = train_fusion(init, std::span(&s, 1), FusionConfig{}, gradient_splat(), cfg);
  CHECK(res.params == init);
  REQUIRE(res.curve.size() == 3);
  CHECK(res.curve[0].loss.total == res.curve[2].loss.total);
  CHECK(loss_curve_csv(res.curve).starts_with("step,lr,ce,lovasz,total\n"));
}

TEST_CASE("training: divergence is reported") {
  // Two overlapping extras whose evidence overflows to infinity.
  TrainSample s = gradient_fixture();
  SemanticGaussian hot;
  hot.scale = {0.5, 0.5, 0.5};
  hot.semantics[0] = 1.7e308;
  s.extras = {hot, hot};
  const FusionParams init = gradient_params();
  TrainConfig cfg;
  try {
    train_fusion(init, std::span(&s, 1), FusionConfig{}, gradient_splat(), cfg);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Divergence);
  }
}

TEST_CASE("warm start reproduces the ego Gaussians approximately") {
  std::vector<TrainSample> samples;
  for (std::uint64_t seed = 30; seed < 34; ++seed) samples.push_back(gradient_fixture(seed));
  const FusionConfig cfg;
  const FusionParams p = identity_warm_start(samples, cfg, 1);
  const auto fused = fuse_scene(samples[0].ego, samples[0].received, cfg, p);
  for (std::size_t i = 0; i < fused.size(); ++i) {
    const auto& e = samples[0].ego[i];
    for (int a = 0; a < 3; ++a) CHECK(std::abs(fused[i].mean[a] - e.mean[a]) < 1e-12);
    CHECK(std::abs(fused[i].opacity - e.opacity) < 0.1);
  }
}

}  // TEST_SUITE
