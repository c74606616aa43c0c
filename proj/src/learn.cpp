#include "gscollab/learn.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "gscollab/rng.hpp"

namespace gscollab {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Inverse of softplus, for targets that are already positive.
double softplus_inverse(double y) {
  y = std::max(y, 1e-6);
  return y > 30.0 ? y : std::log(std::expm1(y));
}

double logit(double a) {
  a = std::clamp(a, 1e-6, 1.0 - 1e-6);
  return std::log(a / (1.0 - a));
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses

std::vector<double> softmax_probs(std::span<const double> channels) {
  if (channels.size() % kNumClasses != 0) throw InvalidArgument("softmax: channel count is not a multiple of C");
  std::vector<double> p(channels.size());
  for (std::size_t v = 0; v < channels.size(); v += kNumClasses) {
    double mx = channels[v];
    for (std::size_t c = 1; c < kNumClasses; ++c) mx = std::max(mx, channels[v + c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < kNumClasses; ++c) sum += (p[v + c] = std::exp(channels[v + c] - mx));
    for (std::size_t c = 0; c < kNumClasses; ++c) p[v + c] /= sum;
  }
  return p;
}

std::vector<double> softmax_probs(const ChannelGrid& channels) { return softmax_probs(channels.values); }

LossValue cross_entropy(std::span<const double> probs, std::span<const std::uint8_t> labels) {
  if (probs.size() != labels.size() * kNumClasses) throw InvalidArgument("cross_entropy: shape mismatch");
  if (labels.empty()) throw InvalidArgument("cross_entropy: no voxels");
  LossValue out;
  out.grad.assign(probs.begin(), probs.end());
  const double inv_n = 1.0 / static_cast<double>(labels.size());
  double sum = 0.0;
  for (std::size_t v = 0; v < labels.size(); ++v) {
    const std::uint8_t y = labels[v];
    if (y >= kNumClasses) throw Error(ErrorCode::InvalidLabel, "cross_entropy: label " + std::to_string(y) + " out of range");
    sum -= std::log(std::max(probs[v * kNumClasses + y], std::numeric_limits<double>::min()));
    out.grad[v * kNumClasses + y] -= 1.0;
  }
  for (double& g : out.grad) g *= inv_n;
  out.value = sum * inv_n;
  return out;
}

LossValue lovasz_class(std::span<const double> fg_probs, std::span<const std::uint8_t> fg_truth) {
  const std::size_t n = fg_probs.size();
  if (fg_truth.size() != n) throw InvalidArgument("lovasz: shape mismatch");
  LossValue out;
  out.grad.assign(n, 0.0);
  if (n == 0) return out;
  std::vector<double> err(n);
  double gts = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    err[i] = std::abs((fg_truth[i] ? 1.0 : 0.0) - fg_probs[i]);
    gts += fg_truth[i] ? 1.0 : 0.0;
  }
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    return err[a] != err[b] ? err[a] > err[b] : a < b;
  });
  double cum_fg = 0.0, cum_bg = 0.0, prev_jac = 0.0, loss = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::uint32_t i = order[k];
    if (fg_truth[i]) cum_fg += 1.0; else cum_bg += 1.0;
    const double jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
    const double g = jac - prev_jac;
    prev_jac = jac;
    loss += err[i] * g;
    out.grad[i] = fg_truth[i] ? -g : g;
  }
  out.value = loss;
  return out;
}

LovaszResult lovasz_softmax(std::span<const double> probs, std::span<const std::uint8_t> labels) {
  const std::size_t n = labels.size();
  if (probs.size() != n * kNumClasses) throw InvalidArgument("lovasz_softmax: shape mismatch");
  if (n == 0) throw InvalidArgument("lovasz_softmax: no voxels");
  LovaszResult r;
  r.loss.grad.assign(probs.size(), 0.0);
  for (std::uint8_t y : labels) {
    if (y >= kNumClasses) throw Error(ErrorCode::InvalidLabel, "lovasz_softmax: label out of range");
    r.present[y] = true;
  }
  const auto n_present = static_cast<double>(std::count(r.present.begin(), r.present.end(), true));
  std::vector<double> fg(n);
  std::vector<std::uint8_t> truth(n);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (!r.present[c]) continue;
    for (std::size_t v = 0; v < n; ++v) {
      fg[v] = probs[v * kNumClasses + c];
      truth[v] = labels[v] == c ? 1 : 0;
    }
    const LossValue lc = lovasz_class(fg, truth);
    r.per_class[c] = lc.value;
    r.loss.value += lc.value / n_present;
    for (std::size_t v = 0; v < n; ++v) r.loss.grad[v * kNumClasses + c] = lc.grad[v] / n_present;
  }
  return r;
}

std::vector<double> softmax_backward(std::span<const double> probs, std::span<const double> grad_probs) {
  if (probs.size() != grad_probs.size()) throw InvalidArgument("softmax_backward: shape mismatch");
  std::vector<double> g(probs.size());
  for (std::size_t v = 0; v < probs.size(); v += kNumClasses) {
    double dotp = 0.0;
    for (std::size_t c = 0; c < kNumClasses; ++c) dotp += probs[v + c] * grad_probs[v + c];
    for (std::size_t c = 0; c < kNumClasses; ++c) g[v + c] = probs[v + c] * (grad_probs[v + c] - dotp);
  }
  return g;
}

LossReport occupancy_loss(const ChannelGrid& pred, const LabelGrid& target, std::vector<double>* grad_channels) {
  if (!(pred.geometry == target.geometry)) throw InvalidArgument("loss: prediction and target geometry differ");
  const std::vector<double> probs = softmax_probs(pred);
  LossValue ce = cross_entropy(probs, target.labels);
  LovaszResult lz = lovasz_softmax(probs, target.labels);
  LossReport r;
  r.ce = ce.value;
  r.lovasz = lz.loss.value;
  r.total = r.ce + r.lovasz;
  r.per_class_lovasz = lz.per_class;
  if (grad_channels) {
    *grad_channels = softmax_backward(probs, lz.loss.grad);
    for (std::size_t i = 0; i < grad_channels->size(); ++i) (*grad_channels)[i] += ce.grad[i];
  }
  return r;
}

// ---------------------------------------------------------------------------
// Calibration

void CalibrationParams::validate() const {
  bool ok = std::isfinite(opacity_scale) && std::isfinite(opacity_bias);
  for (double g : log_gain) ok = ok && std::isfinite(g);
  if (!ok) throw Error(ErrorCode::InvalidParams, "calibration params: non-finite entry");
}

SemanticGaussian calibrate(const SemanticGaussian& g, const CalibrationParams& p) {
  SemanticGaussian out = g;
  for (std::size_t c = 0; c < kNumClasses; ++c) out.semantics[c] = std::exp(p.log_gain[c]) * g.semantics[c];
  out.opacity = sigmoid(p.opacity_scale * logit(g.opacity) + p.opacity_bias);
  return out;
}

std::vector<std::uint8_t> encode_calibration(const CalibrationParams& p) {
  Tensor gains(kNumClasses, 1), opacity(2, 1);
  std::copy(p.log_gain.begin(), p.log_gain.end(), gains.data.begin());
  opacity.data = {p.opacity_scale, p.opacity_bias};
  const Tensor* t[] = {&gains, &opacity};
  return encode_fprm(t);
}

CalibrationParams decode_calibration(std::span<const std::uint8_t> bytes) {
  const std::vector<Tensor> t = decode_fprm(bytes);
  if (t.size() != 2 || t[0].rows != kNumClasses || t[0].cols != 1 || t[1].rows != 2 || t[1].cols != 1) {
    throw DecodeError(DecodeFailure::BadField, "fprm: not a calibration parameter file");
  }
  CalibrationParams p;
  std::copy(t[0].data.begin(), t[0].data.end(), p.log_gain.begin());
  p.opacity_scale = t[1].data[0];
  p.opacity_bias = t[1].data[1];
  return p;
}

// ---------------------------------------------------------------------------
// Render sets and per-sample losses

std::vector<SemanticGaussian> learned_render_set(const TrainSample& s, const FusionConfig& cfg,
                                                 const FusionParams& params) {
  const auto fused = fuse_scene(s.ego, s.received, cfg, params);
  auto out = fused_render_set(fused, s.ego, s.received, cfg);
  out.insert(out.end(), s.extras.begin(), s.extras.end());
  return out;
}

std::vector<SemanticGaussian> naive_render_set(const TrainSample& s, const CalibrationParams& params) {
  std::vector<SemanticGaussian> out(s.ego.begin(), s.ego.end());
  out.reserve(s.ego.size() + s.received.size() + s.extras.size());
  for (const auto& g : s.received) out.push_back(calibrate(g, params));
  out.insert(out.end(), s.extras.begin(), s.extras.end());
  return out;
}

LossReport learned_loss(const TrainSample& s, const FusionConfig& fcfg, const SplatConfig& scfg,
                        const FusionParams& params, FusionParams* grad) {
  FusionGraph graph;
  const auto fused = graph.forward(s.ego, s.received, fcfg, params);
  auto render = fused_render_set(fused, s.ego, s.received, fcfg);
  render.insert(render.end(), s.extras.begin(), s.extras.end());
  const ChannelGrid pred = splat(render, s.target.geometry, scfg);
  std::vector<double> g_channels;
  const LossReport r = occupancy_loss(pred, s.target, grad ? &g_channels : nullptr);
  if (grad) {
    std::vector<GaussianGrad> gg(render.size());
    splat_backward(render, s.target.geometry, scfg, g_channels, gg);
    *grad = graph.backward(std::span<const GaussianGrad>(gg.data(), fused.size()));
  }
  return r;
}

LossReport naive_loss(const TrainSample& s, const SplatConfig& scfg, const CalibrationParams& params,
                      CalibrationParams* grad) {
  const auto render = naive_render_set(s, params);
  const ChannelGrid pred = splat(render, s.target.geometry, scfg);
  std::vector<double> g_channels;
  const LossReport r = occupancy_loss(pred, s.target, grad ? &g_channels : nullptr);
  if (grad) {
    std::vector<GaussianGrad> gg(render.size());
    splat_backward(render, s.target.geometry, scfg, g_channels, gg);
    CalibrationParams g;
    g.opacity_scale = 0.0;
    for (std::size_t i = 0; i < s.received.size(); ++i) {
      const SemanticGaussian& out = render[s.ego.size() + i];
      const GaussianGrad& d = gg[s.ego.size() + i];
      for (std::size_t c = 0; c < kNumClasses; ++c) g.log_gain[c] += d.semantics[c] * out.semantics[c];
      const double da = d.opacity * out.opacity * (1.0 - out.opacity);
      g.opacity_scale += da * logit(s.received[i].opacity);
      g.opacity_bias += da;
    }
    *grad = g;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Optimizer

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(ErrorCode::ConfigError, "train: epochs must be >= 1");
  if (batch < 1) throw Error(ErrorCode::ConfigError, "train: batch must be >= 1");
  if (!(peak_lr >= 0.0) || !(min_lr >= 0.0) || min_lr > peak_lr) throw Error(ErrorCode::ConfigError, "train: bad learning rates");
  if (!(weight_decay >= 0.0)) throw Error(ErrorCode::ConfigError, "train: weight decay must be >= 0");
}

std::size_t TrainConfig::total_steps(std::size_t num_samples) const {
  const std::size_t per_epoch = (num_samples + batch - 1) / batch;
  const std::size_t n = epochs * per_epoch;
  return max_steps ? std::min(n, *max_steps) : n;
}

double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  if (step < cfg.warmup_steps) {
    return cfg.peak_lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  const std::size_t span = total_steps > cfg.warmup_steps ? total_steps - cfg.warmup_steps : 1;
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span));
  return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(std::vector<std::size_t> block_sizes, const TrainConfig& cfg) : cfg_(cfg) {
  for (std::size_t n : block_sizes) {
    m_.emplace_back(n, 0.0);
    v_.emplace_back(n, 0.0);
  }
}

void AdamW::step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) throw InvalidArgument("adamw: block count mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t b = 0; b < m_.size(); ++b) {
    if (params[b].size() != m_[b].size() || grads[b].size() != m_[b].size()) {
      throw InvalidArgument("adamw: block size mismatch");
    }
    for (std::size_t i = 0; i < m_[b].size(); ++i) {
      const double g = grads[b][i];
      m_[b][i] = cfg_.beta1 * m_[b][i] + (1.0 - cfg_.beta1) * g;
      v_[b][i] = cfg_.beta2 * v_[b][i] + (1.0 - cfg_.beta2) * g * g;
      const double update = (m_[b][i] / bc1) / (std::sqrt(v_[b][i] / bc2) + cfg_.adam_eps);
      params[b][i] -= lr * (update + cfg_.weight_decay * params[b][i]);
    }
  }
}

// ---------------------------------------------------------------------------
// Trainers

namespace {

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

[[noreturn]] void diverged(std::size_t step, const std::string& what) {
  throw Error(ErrorCode::Divergence, "training diverged at step " + std::to_string(step) + ": " + what);
}

// Drives the epoch/batch loop; `eval` returns the loss of one sample and
// adds its gradient (scaled by `weight`) into the accumulator, `apply`
// runs the optimizer with the accumulated gradient.
template <typename Eval, typename Apply>
std::vector<StepRecord> run_loop(std::size_t num_samples, const TrainConfig& cfg, Eval&& eval, Apply&& apply,
                                 const StepCallback& on_step) {
  cfg.validate();
  if (num_samples == 0) throw InvalidArgument("train: no samples");
  const std::size_t total = cfg.total_steps(num_samples);
  Rng rng(derive_seed(cfg.seed, "train-order"));
  std::vector<StepRecord> curve;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < total; ++step) {
    StepRecord rec;
    rec.step = step;
    rec.lr = learning_rate(cfg, step, total);
    const std::size_t nb = std::min(cfg.batch, num_samples);
    for (std::size_t b = 0; b < nb; ++b) {
      if (cursor == order.size()) {
        order = shuffled(num_samples, rng);
        cursor = 0;
      }
      const LossReport r = eval(order[cursor++], 1.0 / static_cast<double>(nb));
      if (!std::isfinite(r.total)) diverged(step, "non-finite loss");
      rec.loss.ce += r.ce / nb;
      rec.loss.lovasz += r.lovasz / nb;
      for (std::size_t c = 0; c < kNumClasses; ++c) rec.loss.per_class_lovasz[c] += r.per_class_lovasz[c] / nb;
    }
    rec.loss.total = rec.loss.ce + rec.loss.lovasz;
    apply(step, rec.lr);
    curve.push_back(rec);
    if (on_step) on_step(rec);
  }
  return curve;
}

}  // namespace

FusionTrainResult train_fusion(const FusionParams& init, std::span<const TrainSample> samples,
                               const FusionConfig& fcfg, const SplatConfig& scfg, const TrainConfig& cfg,
                               const StepCallback& on_step) {
  init.validate();
  FusionTrainResult res;
  res.params = init;
  FusionParams acc;
  auto zero_acc = [&] {
    for (Tensor* t : acc.tensors()) std::fill(t->data.begin(), t->data.end(), 0.0);
  };
  zero_acc();
  std::vector<std::size_t> sizes;
  for (const Tensor* t : init.tensors()) sizes.push_back(t->size());
  AdamW opt(sizes, cfg);

  auto eval = [&](std::size_t i, double weight) {
    FusionParams g;
    const LossReport r = learned_loss(samples[i], fcfg, scfg, res.params, &g);
    auto dst = acc.tensors();
    auto src = g.tensors();
    for (std::size_t t = 0; t < dst.size(); ++t)
      for (std::size_t k = 0; k < dst[t]->size(); ++k) dst[t]->data[k] += weight * src[t]->data[k];
    return r;
  };
  auto apply = [&](std::size_t step, double lr) {
    std::vector<std::span<double>> p;
    std::vector<std::span<const double>> g;
    auto pt = res.params.tensors();
    auto gt = acc.tensors();
    for (std::size_t t = 0; t < pt.size(); ++t) {
      if (!all_finite(gt[t]->data)) diverged(step, std::string("non-finite gradient in ") + FusionParams::tensor_name(t));
      p.emplace_back(pt[t]->data);
      g.emplace_back(gt[t]->data);
    }
    opt.step(p, g, lr);
    zero_acc();
  };
  res.curve = run_loop(samples.size(), cfg, eval, apply, on_step);
  return res;
}

CalibrationTrainResult train_calibration(const CalibrationParams& init, std::span<const TrainSample> samples,
                                         const SplatConfig& scfg, const TrainConfig& cfg,
                                         const StepCallback& on_step) {
  init.validate();
  CalibrationTrainResult res;
  res.params = init;
  std::vector<double> acc(kNumClasses + 2, 0.0);
  AdamW opt({kNumClasses + 2}, cfg);
  auto eval = [&](std::size_t i, double weight) {
    CalibrationParams g;
    const LossReport r = naive_loss(samples[i], scfg, res.params, &g);
    for (std::size_t c = 0; c < kNumClasses; ++c) acc[c] += weight * g.log_gain[c];
    acc[kNumClasses] += weight * g.opacity_scale;
    acc[kNumClasses + 1] += weight * g.opacity_bias;
    return r;
  };
  auto apply = [&](std::size_t step, double lr) {
    if (!all_finite(acc)) diverged(step, "non-finite calibration gradient");
    std::vector<double> flat(res.params.log_gain.begin(), res.params.log_gain.end());
    flat.push_back(res.params.opacity_scale);
    flat.push_back(res.params.opacity_bias);
    std::span<double> p[] = {flat};
    std::span<const double> g[] = {acc};
    opt.step(p, g, lr);
    std::copy_n(flat.begin(), kNumClasses, res.params.log_gain.begin());
    res.params.opacity_scale = flat[kNumClasses];
    res.params.opacity_bias = flat[kNumClasses + 1];
    std::fill(acc.begin(), acc.end(), 0.0);
  };
  res.curve = run_loop(samples.size(), cfg, eval, apply, on_step);
  return res;
}

// ---------------------------------------------------------------------------
// Warm start

FusionParams identity_warm_start(std::span<const TrainSample> samples, const FusionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  FusionParams p;
  Rng rng(seed);
  constexpr std::size_t kPass = 2 * kEgoFeatureDim;  // signed copies of the ego features
  // Layer 1: pass-through units, then random units over everything but the
  // absolute position (whose range would swamp the other inputs).
  for (std::size_t j = 0; j < kEgoFeatureDim; ++j) {
    p.w1(2 * j, j) = 1.0;
    p.w1(2 * j + 1, j) = -1.0;
  }
  const double sd1 = std::sqrt(2.0 / static_cast<double>(kPairFeatureDim - 3));
  for (std::size_t i = kPass; i < kHiddenDim; ++i) {
    for (std::size_t j = 3; j < kPairFeatureDim; ++j) p.w1(i, j) = sd1 * rng.normal();
    p.b1(i, 0) = 0.1 * rng.normal();
  }
  const double sd2 = std::sqrt(2.0 / static_cast<double>(kHiddenDim - kPass));
  for (std::size_t i = 0; i < kPass; ++i) p.w2(i, i) = 1.0;
  for (std::size_t i = kPass; i < kHiddenDim; ++i) {
    for (std::size_t j = kPass; j < kHiddenDim; ++j) p.w2(i, j) = sd2 * rng.normal();
    p.b2(i, 0) = 0.1 * rng.normal();
  }
  const double sdq = 0.05;
  for (double& v : p.q.data) v = sdq * rng.normal();
  for (double& v : p.k.data) v = sdq * rng.normal();

  // Gather pair features, capped so the fit stays cheap.
  constexpr std::size_t kMaxPairs = 8192;
  std::vector<PairFeatures> pairs;
  std::vector<const SemanticGaussian*> egos;
  for (const TrainSample& s : samples) {
    std::vector<Vec3> means(s.received.size());
    for (std::size_t j = 0; j < means.size(); ++j) means[j] = s.received[j].mean;
    const SpatialHashGrid grid(means, cfg.radius_rho);
    for (const auto& e : s.ego) {
      for (std::uint32_t j : grid.query(e.mean, cfg.radius_rho, cfg.max_neighbors)) {
        pairs.push_back(pairwise_features(e, s.received[j]));
        egos.push_back(&e);
      }
    }
  }
  if (pairs.empty()) return p;
  std::vector<std::size_t> pick(pairs.size());
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  if (pick.size() > kMaxPairs) {
    for (std::size_t i = 0; i < kMaxPairs; ++i) std::swap(pick[i], pick[i + rng.below(pick.size() - i)]);
    pick.resize(kMaxPairs);
  }

  const std::size_t n = pick.size();
  Eigen::MatrixXd h(n, kHiddenDim + 1);
  Eigen::MatrixXd y(n, kProposalDim);
  std::vector<double> h1(kHiddenDim);
  for (std::size_t r = 0; r < n; ++r) {
    const PairFeatures& z = pairs[pick[r]];
    for (std::size_t i = 0; i < kHiddenDim; ++i) {
      double acc = p.b1(i, 0);
      for (std::size_t j = 0; j < kPairFeatureDim; ++j) acc += p.w1(i, j) * z[j];
      h1[i] = std::max(acc, 0.0);
    }
    for (std::size_t i = 0; i < kHiddenDim; ++i) {
      double acc = p.b2(i, 0);
      for (std::size_t j = 0; j < kHiddenDim; ++j) acc += p.w2(i, j) * h1[j];
      h(r, i) = std::max(acc, 0.0);
    }
    h(r, kHiddenDim) = 1.0;
    const SemanticGaussian& e = *egos[pick[r]];
    const Quat q = canonicalize_quaternion(e.rotation);
    for (std::size_t a = 0; a < 3; ++a) {
      y(r, raw::kDeltaMean + a) = 0.0;
      y(r, raw::kScale + a) = softplus_inverse(e.scale[a] - 1e-4);
    }
    y(r, raw::kRotation + 0) = q.w - 1.0;
    y(r, raw::kRotation + 1) = q.x;
    y(r, raw::kRotation + 2) = q.y;
    y(r, raw::kRotation + 3) = q.z;
    y(r, raw::kOpacity) = logit(e.opacity);
    for (std::size_t c = 0; c < kNumClasses; ++c) y(r, raw::kSemantics + c) = softplus_inverse(e.semantics[c]);
  }
  Eigen::MatrixXd gram = h.transpose() * h;
  const double ridge = 1e-6 * gram.trace() / static_cast<double>(gram.rows()) + 1e-9;
  gram.diagonal().array() += ridge;
  const Eigen::MatrixXd sol = gram.ldlt().solve(h.transpose() * y);  // (H+1) x 24
  for (std::size_t o = 0; o < kProposalDim; ++o) {
    if (o < raw::kScale) continue;  // the offset stays exactly zero
    for (std::size_t i = 0; i < kHiddenDim; ++i) p.w3(o, i) = sol(i, o);
    p.b3(o, 0) = sol(kHiddenDim, o);
  }
  p.validate();
  return p;
}

std::string loss_curve_csv(std::span<const StepRecord> curve) {
  std::ostringstream os;
  os.precision(10);
  os << "step,lr,ce,lovasz,total\n";
  for (const StepRecord& r : curve) {
    os << r.step << ',' << r.lr << ',' << r.loss.ce << ',' << r.loss.lovasz << ',' << r.loss.total << '\n';
  }
  return os.str();
}

}  // namespace gscollab
