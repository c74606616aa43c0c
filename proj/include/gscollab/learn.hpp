#pragma once

// Training of the fusion parameters: voxel-wise cross-entropy plus
// Lovász-Softmax on the splatted fused scene, analytic gradients through
// splatting and fusion, and an AdamW trainer with warmup + cosine decay.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gscollab/core.hpp"
#include "gscollab/fusion.hpp"
#include "gscollab/splat.hpp"
#include "gscollab/voxel_grid.hpp"

namespace gscollab {

/// Per-voxel softmax over the C raw channels, laid out like the channels.
std::vector<double> softmax_probs(const ChannelGrid& channels);
std::vector<double> softmax_probs(std::span<const double> channels);

struct LossValue {
  double value = 0.0;
  std::vector<double> grad;  // same layout as the input it differentiates
};

/// Mean negative log-probability of the true class. The gradient is with
/// respect to the raw channels: (probs - onehot) / N. Throws
/// Error(InvalidLabel) on labels >= C.
LossValue cross_entropy(std::span<const double> probs, std::span<const std::uint8_t> labels);

/// Lovász extension of the Jaccard loss for one class given foreground
/// probabilities and a binary ground truth. Errors are sorted in decreasing
/// order with ties broken by voxel index. Gradient is wrt `fg_probs`.
LossValue lovasz_class(std::span<const double> fg_probs, std::span<const std::uint8_t> fg_truth);

struct LovaszResult {
  LossValue loss;                          // gradient wrt probs (N x C)
  std::array<double, kNumClasses> per_class{};
  std::array<bool, kNumClasses> present{};
};

/// Mean of the per-class Lovász terms over classes present in `labels`.
LovaszResult lovasz_softmax(std::span<const double> probs, std::span<const std::uint8_t> labels);

/// Pulls a gradient wrt softmax probabilities back to the raw channels.
std::vector<double> softmax_backward(std::span<const double> probs, std::span<const double> grad_probs);

struct LossReport {
  double ce = 0.0;
  double lovasz = 0.0;
  double total = 0.0;
  std::array<double, kNumClasses> per_class_lovasz{};
};

/// CE + Lovász on a channel grid against labels; optionally returns the
/// gradient of the total wrt the channels.
LossReport occupancy_loss(const ChannelGrid& pred, const LabelGrid& target, std::vector<double>* grad_channels);

// ---------------------------------------------------------------------------
// Naive-fusion calibration: per-class semantic gain and an affine map on
// the opacity logit, applied to received Gaussians before stacking.

struct CalibrationParams {
  std::array<double, kNumClasses> log_gain{};  // c'_k = exp(g_k) c_k
  double opacity_scale = 1.0;                  // a' = sigmoid(scale * logit(a) + bias)
  double opacity_bias = 0.0;

  void validate() const;
  friend bool operator==(const CalibrationParams&, const CalibrationParams&) = default;
};

SemanticGaussian calibrate(const SemanticGaussian& g, const CalibrationParams& p);
std::vector<std::uint8_t> encode_calibration(const CalibrationParams& p);
CalibrationParams decode_calibration(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Training

/// One supervised example: an ego agent's own Gaussians, what it received
/// (already in its frame and stacked), constant extras appended at render
/// time (the empty-space Gaussian), and the target labels.
struct TrainSample {
  std::vector<SemanticGaussian> ego;
  std::vector<SemanticGaussian> received;
  std::vector<SemanticGaussian> extras;
  LabelGrid target;
};

/// Gaussians splatted for a learned-fusion prediction.
std::vector<SemanticGaussian> learned_render_set(const TrainSample& s, const FusionConfig& cfg,
                                                 const FusionParams& params);
/// Gaussians splatted for a naive-fusion prediction.
std::vector<SemanticGaussian> naive_render_set(const TrainSample& s, const CalibrationParams& params);

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t batch = 1;                  // samples per optimizer step
  std::optional<std::size_t> max_steps;   // cap on the number of steps
  std::size_t warmup_steps = 50;
  double peak_lr = 2e-4;
  double min_lr = 0.0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t total_steps(std::size_t num_samples) const;
};

/// Linear warmup to peak_lr over warmup_steps, then cosine decay to min_lr
/// at total_steps.
double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t total_steps);

/// AdamW with decoupled weight decay over a flat list of parameter blocks.
class AdamW {
 public:
  AdamW(std::vector<std::size_t> block_sizes, const TrainConfig& cfg);
  void step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  LossReport loss;
};

using StepCallback = std::function<void(const StepRecord&)>;

struct FusionTrainResult {
  FusionParams params;
  std::vector<StepRecord> curve;
};

struct CalibrationTrainResult {
  CalibrationParams params;
  std::vector<StepRecord> curve;
};

/// Loss of the learned prediction for one sample, with optional parameter
/// gradient (used by the trainer and by gradient checks).
LossReport learned_loss(const TrainSample& s, const FusionConfig& fcfg, const SplatConfig& scfg,
                        const FusionParams& params, FusionParams* grad);
LossReport naive_loss(const TrainSample& s, const SplatConfig& scfg, const CalibrationParams& params,
                      CalibrationParams* grad);

/// Throws Error(Divergence) when a loss or gradient becomes non-finite.
FusionTrainResult train_fusion(const FusionParams& init, std::span<const TrainSample> samples,
                               const FusionConfig& fcfg, const SplatConfig& scfg, const TrainConfig& cfg,
                               const StepCallback& on_step = {});
CalibrationTrainResult train_calibration(const CalibrationParams& init, std::span<const TrainSample> samples,
                                         const SplatConfig& scfg, const TrainConfig& cfg,
                                         const StepCallback& on_step = {});

/// Fusion parameters whose proposals approximately reproduce the ego
/// Gaussian (zero offset, ego scale, rotation, opacity and semantics), so
/// that training starts from a near pass-through fusion. Hidden units are
/// signed copies of the ego features plus random ReLU features; the output
/// layer is a ridge least-squares fit over the pairs found in `samples`.
FusionParams identity_warm_start(std::span<const TrainSample> samples, const FusionConfig& cfg, std::uint64_t seed);

/// CSV with header "step,lr,ce,lovasz,total".
std::string loss_curve_csv(std::span<const StepRecord> curve);

}  // namespace gscollab
