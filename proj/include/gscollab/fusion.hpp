#pragma once

// Cross-agent Gaussian fusion. Each ego Gaussian gathers the received
// Gaussians within radius rho, turns every (ego, neighbor) pair into a
// 45-dim feature, maps it through a small MLP to a refinement proposal,
// pools the proposals (mean or attention), and applies the pooled update
// with a confidence-weighted semantic blend.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "gscollab/core.hpp"
#include "gscollab/splat.hpp"

namespace gscollab {

inline constexpr std::size_t kEgoFeatureDim = 24;
inline constexpr std::size_t kRelFeatureDim = 21;
inline constexpr std::size_t kPairFeatureDim = kEgoFeatureDim + kRelFeatureDim;
inline constexpr std::size_t kProposalDim = 24;
inline constexpr std::size_t kHiddenDim = 128;
inline constexpr std::size_t kAttentionDim = 32;

// Offsets of the proposal fields inside the raw MLP output.
namespace raw {
inline constexpr std::size_t kDeltaMean = 0;
inline constexpr std::size_t kScale = 3;
inline constexpr std::size_t kRotation = 6;
inline constexpr std::size_t kOpacity = 10;
inline constexpr std::size_t kSemantics = 11;
}  // namespace raw

enum class Pooling { Mean, Attention };

/// What happens to received Gaussians once fusion has run.
enum class ReceivedPolicy {
  Discard,        ///< only the refined ego set is splatted
  KeepUnmatched,  ///< received Gaussians with no ego Gaussian within rho are splatted too
  KeepAll,        ///< every received Gaussian is splatted alongside the refined ego set
};

struct FusionConfig {
  double radius_rho = 0.4;
  Pooling pooling = Pooling::Attention;
  double epsilon = 1e-8;
  std::size_t max_neighbors = 64;
  ReceivedPolicy received_policy = ReceivedPolicy::KeepUnmatched;

  void validate() const;
};

/// Dense row-major matrix (biases are n x 1).
struct Tensor {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::uint32_t r, std::uint32_t c) : rows(r), cols(c), data(std::size_t{r} * c, 0.0) {}
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Learned fusion state: MLP 45 -> 128 -> 128 -> 24 (ReLU hidden) and the
/// attention projections Q (32 x 24, applied to ego features) and
/// K (32 x 21, applied to relative features).
struct FusionParams {
  Tensor w1{kHiddenDim, kPairFeatureDim};
  Tensor b1{kHiddenDim, 1};
  Tensor w2{kHiddenDim, kHiddenDim};
  Tensor b2{kHiddenDim, 1};
  Tensor w3{kProposalDim, kHiddenDim};
  Tensor b3{kProposalDim, 1};
  Tensor q{kAttentionDim, kEgoFeatureDim};
  Tensor k{kAttentionDim, kRelFeatureDim};

  static constexpr std::size_t kTensorCount = 8;

  /// He-style random initialization (zero biases) from a seed.
  static FusionParams random(std::uint64_t seed, double gain = 1.0);

  std::array<Tensor*, kTensorCount> tensors();
  std::array<const Tensor*, kTensorCount> tensors() const;
  static const char* tensor_name(std::size_t i);

  /// Throws Error(InvalidParams) on wrong shapes or non-finite entries.
  void validate() const;
  void scale_by(double s);
  friend bool operator==(const FusionParams&, const FusionParams&) = default;
};

/// FPRM container: "FPRM", u32 version = 1, u32 tensor count, then per
/// tensor u32 rows, u32 cols, f32 data row-major.
std::vector<std::uint8_t> encode_fprm(std::span<const Tensor* const> tensors);
std::vector<Tensor> decode_fprm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_fusion_params(const FusionParams& p);
FusionParams decode_fusion_params(std::span<const std::uint8_t> bytes);

/// Uniform hash grid over points for fixed-radius queries.
class SpatialHashGrid {
 public:
  SpatialHashGrid(std::span<const Vec3> points, double cell_size);

  /// Indices within the closed ball, nearest first (ties by index),
  /// truncated to max_count.
  std::vector<std::uint32_t> query(const Vec3& center, double radius, std::size_t max_count) const;
  bool any_within(const Vec3& center, double radius) const;

 private:
  std::int64_t key(const Vec3& p) const;
  template <typename Fn>
  void visit(const Vec3& center, double radius, Fn&& fn) const;

  std::vector<Vec3> points_;
  double cell_;
  std::vector<std::uint32_t> order_;  // point indices sorted by cell key
  std::vector<std::pair<std::int64_t, std::pair<std::uint32_t, std::uint32_t>>> cells_;  // sorted key -> [begin,end)
};

/// Received Gaussians within rho of the ego mean (closed ball), nearest
/// first, at most max_neighbors.
std::vector<std::uint32_t> neighborhood(const SemanticGaussian& ego, std::span<const SemanticGaussian> received,
                                        double rho, std::size_t max_neighbors = 64);

using EgoFeatures = std::array<double, kEgoFeatureDim>;
using RelFeatures = std::array<double, kRelFeatureDim>;
using PairFeatures = std::array<double, kPairFeatureDim>;

/// [m, s, canonical r, a, c].
EgoFeatures ego_features(const SemanticGaussian& ego);
/// [m_j - m_k, s_j - s_k, |<r_j, r_k>|, a_j, c_j].
RelFeatures relative_features(const SemanticGaussian& ego, const SemanticGaussian& neighbor);
PairFeatures pairwise_features(const SemanticGaussian& ego, const SemanticGaussian& neighbor);

struct Proposal {
  Vec3 delta_mean{};
  Vec3 scale{};
  Quat rotation{};
  double opacity = 0.0;
  Semantics semantics{};
};

/// Output activations applied to a raw 24-vector: identity offset,
/// softplus + 1e-4 scale, normalize(raw + (1,0,0,0)) rotation, sigmoid
/// opacity, softplus semantics.
Proposal proposal_from_raw(std::span<const double, kProposalDim> raw);
Proposal propose(const PairFeatures& z, const FusionParams& params);

/// softmax_j(<Q f_ego, K f_rel_j> / sqrt(d_proj)).
std::vector<double> attention_weights(const EgoFeatures& ego, std::span<const RelFeatures> rel,
                                      const FusionParams& params);

struct PooledProposal {
  Proposal proposal;
  std::vector<double> weights;
};

/// Weighted sum of the proposals per field; the rotation is sign-aligned to
/// the first proposal, summed and renormalized. Returns nullopt for an
/// empty list (the caller keeps the ego Gaussian unchanged).
std::optional<PooledProposal> pool(std::span<const Proposal> proposals, Pooling mode, const EgoFeatures& ego,
                                   std::span<const RelFeatures> rel, const FusionParams& params);

/// max(v / (1^T v + eps)).
double confidence(const Semantics& v, double epsilon);
/// conf(c) / (conf(c) + conf(pooled)).
double blend_alpha(const Semantics& ego, const Semantics& pooled, double epsilon);

SemanticGaussian update_ego(const SemanticGaussian& ego, const Proposal& pooled, double epsilon);

/// Refines every ego Gaussian from its received neighbors. The output has
/// the same size and order as `ego`; Gaussians without neighbors pass
/// through unchanged. `received` holds all received sets already stacked
/// in sender order and expressed in the ego frame.
std::vector<SemanticGaussian> fuse_scene(std::span<const SemanticGaussian> ego,
                                         std::span<const SemanticGaussian> received, const FusionConfig& cfg,
                                         const FusionParams& params);

/// Received Gaussians with no ego mean within rho.
std::vector<SemanticGaussian> unmatched_received(std::span<const SemanticGaussian> ego,
                                                 std::span<const SemanticGaussian> received, double rho);

/// Gaussians splatted for an ego agent after fusion, per the received policy.
std::vector<SemanticGaussian> fused_render_set(std::span<const SemanticGaussian> fused_ego,
                                               std::span<const SemanticGaussian> ego,
                                               std::span<const SemanticGaussian> received,
                                               const FusionConfig& cfg);

/// Batched fusion forward pass that keeps its activations so the gradient
/// of a loss on the fused ego Gaussians can be pulled back to the params.
class FusionGraph {
 public:
  std::vector<SemanticGaussian> forward(std::span<const SemanticGaussian> ego,
                                        std::span<const SemanticGaussian> received, const FusionConfig& cfg,
                                        const FusionParams& params);

  /// `grad_fused` is dL/d(fused ego Gaussian) for every ego Gaussian.
  /// Returns dL/d(params) with the same layout as FusionParams. Throws
  /// StateError when no forward pass has been recorded.
  FusionParams backward(std::span<const GaussianGrad> grad_fused) const;

  bool recorded() const { return recorded_; }
  std::size_t pair_count() const { return pair_ego_.size(); }

 private:
  bool recorded_ = false;
  FusionConfig cfg_;
  const FusionParams* params_ = nullptr;
  std::vector<SemanticGaussian> ego_;
  std::vector<std::uint32_t> pair_begin_;  // per ego, offsets into pair arrays (size n+1)
  std::vector<std::uint32_t> pair_ego_;
  std::vector<double> z_;      // pairs x 45
  std::vector<double> a1_;     // pairs x 128 pre-activation
  std::vector<double> h1_;     // pairs x 128
  std::vector<double> a2_;
  std::vector<double> h2_;
  std::vector<double> out_;    // pairs x 24 raw outputs
  std::vector<double> qe_;     // ego x 32 projected ego features
  std::vector<double> kr_;     // pairs x 32 projected relative features
  std::vector<double> weights_;
  std::vector<double> sign_;   // rotation alignment sign per pair
  std::vector<Semantics> pooled_sem_;
  std::vector<Quat> pooled_rot_raw_;  // unnormalized sign-aligned weighted sum
  std::vector<double> rot_sign_;      // canonicalization sign of the pooled rotation
};

}  // namespace gscollab
