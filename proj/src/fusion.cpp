#include "gscollab/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "gscollab/bytes.hpp"
#include "gscollab/kernels/kernels.hpp"
#include "gscollab/rng.hpp"

namespace gscollab {

void FusionConfig::validate() const {
  if (!(radius_rho > 0.0)) throw InvalidArgument("fusion: radius_rho must be positive");
  if (!(epsilon > 0.0)) throw InvalidArgument("fusion: epsilon must be positive");
  if (max_neighbors == 0) throw InvalidArgument("fusion: max_neighbors must be positive");
}

// ---------------------------------------------------------------------------
// Parameters

FusionParams FusionParams::random(std::uint64_t seed, double gain) {
  FusionParams p;
  Rng rng(seed);
  auto fill = [&](Tensor& t, double fan_in) {
    const double sd = gain * std::sqrt(2.0 / fan_in);
    for (double& v : t.data) v = sd * rng.normal();
  };
  fill(p.w1, kPairFeatureDim);
  fill(p.w2, kHiddenDim);
  fill(p.w3, kHiddenDim);
  fill(p.q, kEgoFeatureDim);
  fill(p.k, kRelFeatureDim);
  return p;
}

std::array<Tensor*, FusionParams::kTensorCount> FusionParams::tensors() {
  return {&w1, &b1, &w2, &b2, &w3, &b3, &q, &k};
}

std::array<const Tensor*, FusionParams::kTensorCount> FusionParams::tensors() const {
  return {&w1, &b1, &w2, &b2, &w3, &b3, &q, &k};
}

const char* FusionParams::tensor_name(std::size_t i) {
  static constexpr const char* kNames[] = {"w1", "b1", "w2", "b2", "w3", "b3", "q", "k"};
  return i < kTensorCount ? kNames[i] : "?";
}

void FusionParams::validate() const {
  static const FusionParams shapes;
  const auto want = shapes.tensors();
  const auto have = tensors();
  for (std::size_t i = 0; i < kTensorCount; ++i) {
    if (have[i]->rows != want[i]->rows || have[i]->cols != want[i]->cols ||
        have[i]->data.size() != want[i]->data.size()) {
      throw Error(ErrorCode::InvalidParams, std::string("fusion params: bad shape for ") + tensor_name(i));
    }
    for (double v : have[i]->data)
      if (!std::isfinite(v)) throw Error(ErrorCode::InvalidParams, std::string("fusion params: non-finite ") + tensor_name(i));
  }
}

void FusionParams::scale_by(double s) {
  for (Tensor* t : tensors())
    for (double& v : t->data) v *= s;
}

std::vector<std::uint8_t> encode_fprm(std::span<const Tensor* const> tensors) {
  ByteWriter w;
  w.put_bytes("FPRM");
  w.put_u32(1);
  w.put_u32(static_cast<std::uint32_t>(tensors.size()));
  for (const Tensor* t : tensors) {
    w.put_u32(t->rows);
    w.put_u32(t->cols);
    for (double v : t->data) w.put_f32(static_cast<float>(v));
  }
  return std::move(w).take();
}

std::vector<Tensor> decode_fprm(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (!r.take_magic("FPRM")) throw DecodeError(DecodeFailure::BadMagic, "fprm: bad magic");
  const std::uint32_t version = r.u32();
  if (version != 1) throw DecodeError(DecodeFailure::VersionMismatch, "fprm: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    r.need(std::size_t{rows} * cols * 4, "tensor data");
    Tensor t(rows, cols);
    for (double& v : t.data) {
      v = r.f32();
      if (!std::isfinite(v)) throw DecodeError(DecodeFailure::NonFinite, "fprm: non-finite tensor entry");
    }
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw DecodeError(DecodeFailure::TrailingBytes, "fprm: trailing bytes");
  return out;
}

std::vector<std::uint8_t> encode_fusion_params(const FusionParams& p) {
  const auto t = p.tensors();
  return encode_fprm(std::span<const Tensor* const>(t.data(), t.size()));
}

FusionParams decode_fusion_params(std::span<const std::uint8_t> bytes) {
  std::vector<Tensor> t = decode_fprm(bytes);
  if (t.size() != FusionParams::kTensorCount) {
    throw DecodeError(DecodeFailure::BadField, "fprm: expected 8 fusion tensors, found " + std::to_string(t.size()));
  }
  FusionParams p;
  auto dst = p.tensors();
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i].rows != dst[i]->rows || t[i].cols != dst[i]->cols) {
      throw DecodeError(DecodeFailure::BadField, std::string("fprm: bad shape for ") + FusionParams::tensor_name(i));
    }
    *dst[i] = std::move(t[i]);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Neighborhood search

namespace {

constexpr std::int64_t kCellBias = 1 << 20;

std::int64_t pack_cell(std::int64_t x, std::int64_t y, std::int64_t z) {
  return ((x + kCellBias) << 42) | ((y + kCellBias) << 21) | (z + kCellBias);
}

std::int64_t cell_coord(double v, double cell) {
  return std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(v / cell)), -kCellBias + 1, kCellBias - 2);
}

double distance_sq(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

SpatialHashGrid::SpatialHashGrid(std::span<const Vec3> points, double cell_size)
    : points_(points.begin(), points.end()), cell_(cell_size) {
  if (!(cell_size > 0.0)) throw InvalidArgument("spatial hash: cell size must be positive");
  std::vector<std::pair<std::int64_t, std::uint32_t>> keyed(points_.size());
  for (std::uint32_t i = 0; i < points_.size(); ++i) keyed[i] = {key(points_[i]), i};
  std::sort(keyed.begin(), keyed.end());
  order_.resize(keyed.size());
  for (std::size_t i = 0; i < keyed.size(); ++i) {
    order_[i] = keyed[i].second;
    if (i == 0 || keyed[i].first != keyed[i - 1].first) {
      cells_.push_back({keyed[i].first, {static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i)}});
    }
    cells_.back().second.second = static_cast<std::uint32_t>(i + 1);
  }
}

std::int64_t SpatialHashGrid::key(const Vec3& p) const {
  return pack_cell(cell_coord(p[0], cell_), cell_coord(p[1], cell_), cell_coord(p[2], cell_));
}

template <typename Fn>
void SpatialHashGrid::visit(const Vec3& c, double radius, Fn&& fn) const {
  std::int64_t lo[3], hi[3];
  for (int a = 0; a < 3; ++a) {
    // Widened slightly so rounding in c +- radius cannot drop a boundary cell.
    const double slack = 1e-9 * (std::abs(c[a]) + radius);
    lo[a] = cell_coord(c[a] - radius - slack, cell_);
    hi[a] = cell_coord(c[a] + radius + slack, cell_);
  }
  for (std::int64_t x = lo[0]; x <= hi[0]; ++x)
    for (std::int64_t y = lo[1]; y <= hi[1]; ++y)
      for (std::int64_t z = lo[2]; z <= hi[2]; ++z) {
        const std::int64_t k = pack_cell(x, y, z);
        auto it = std::lower_bound(cells_.begin(), cells_.end(), k,
                                   [](const auto& cell, std::int64_t v) { return cell.first < v; });
        if (it == cells_.end() || it->first != k) continue;
        for (std::uint32_t i = it->second.first; i < it->second.second; ++i) {
          const std::uint32_t idx = order_[i];
          // Squared distances: sqrt rounding would misclassify points at exactly radius.
          const double d2 = distance_sq(points_[idx], c);
          if (d2 <= radius * radius) fn(idx, d2);
        }
      }
}

std::vector<std::uint32_t> SpatialHashGrid::query(const Vec3& center, double radius, std::size_t max_count) const {
  std::vector<std::pair<double, std::uint32_t>> hits;
  visit(center, radius, [&](std::uint32_t idx, double d2) { hits.emplace_back(d2, idx); });
  std::sort(hits.begin(), hits.end());
  if (hits.size() > max_count) hits.resize(max_count);
  std::vector<std::uint32_t> out(hits.size());
  for (std::size_t i = 0; i < hits.size(); ++i) out[i] = hits[i].second;
  return out;
}

bool SpatialHashGrid::any_within(const Vec3& center, double radius) const {
  bool found = false;
  visit(center, radius, [&](std::uint32_t, double) { found = true; });
  return found;
}

namespace {

std::vector<Vec3> means_of(std::span<const SemanticGaussian> gs) {
  std::vector<Vec3> m(gs.size());
  for (std::size_t i = 0; i < gs.size(); ++i) m[i] = gs[i].mean;
  return m;
}

}  // namespace

std::vector<std::uint32_t> neighborhood(const SemanticGaussian& ego, std::span<const SemanticGaussian> received,
                                        double rho, std::size_t max_neighbors) {
  if (!(rho > 0.0)) throw InvalidArgument("neighborhood: rho must be positive");
  const std::vector<Vec3> means = means_of(received);
  return SpatialHashGrid(means, rho).query(ego.mean, rho, max_neighbors);
}

// ---------------------------------------------------------------------------
// Features and proposals

EgoFeatures ego_features(const SemanticGaussian& g) {
  EgoFeatures f{};
  const Quat r = canonicalize_quaternion(g.rotation);
  std::size_t i = 0;
  for (double v : g.mean) f[i++] = v;
  for (double v : g.scale) f[i++] = v;
  f[i++] = r.w;
  f[i++] = r.x;
  f[i++] = r.y;
  f[i++] = r.z;
  f[i++] = g.opacity;
  for (double v : g.semantics) f[i++] = v;
  return f;
}

RelFeatures relative_features(const SemanticGaussian& ego, const SemanticGaussian& nb) {
  RelFeatures f{};
  std::size_t i = 0;
  for (int a = 0; a < 3; ++a) f[i++] = nb.mean[a] - ego.mean[a];
  for (int a = 0; a < 3; ++a) f[i++] = nb.scale[a] - ego.scale[a];
  f[i++] = std::min(1.0, std::abs(nb.rotation.dot(ego.rotation)));
  f[i++] = nb.opacity;
  for (double v : nb.semantics) f[i++] = v;
  return f;
}

PairFeatures pairwise_features(const SemanticGaussian& ego, const SemanticGaussian& nb) {
  PairFeatures z{};
  const EgoFeatures e = ego_features(ego);
  const RelFeatures r = relative_features(ego, nb);
  std::copy(e.begin(), e.end(), z.begin());
  std::copy(r.begin(), r.end(), z.begin() + kEgoFeatureDim);
  return z;
}

namespace {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Proposal proposal_from_raw(std::span<const double, kProposalDim> o) {
  Proposal p;
  for (int a = 0; a < 3; ++a) {
    p.delta_mean[a] = o[raw::kDeltaMean + a];
    p.scale[a] = softplus(o[raw::kScale + a]) + 1e-4;
  }
  const Quat q{o[raw::kRotation] + 1.0, o[raw::kRotation + 1], o[raw::kRotation + 2], o[raw::kRotation + 3]};
  const double n = q.norm();
  p.rotation = n > 0.0 ? Quat{q.w / n, q.x / n, q.y / n, q.z / n} : Quat::identity();
  p.opacity = sigmoid(o[raw::kOpacity]);
  for (std::size_t c = 0; c < kNumClasses; ++c) p.semantics[c] = softplus(o[raw::kSemantics + c]);
  return p;
}

Proposal propose(const PairFeatures& z, const FusionParams& params) {
  params.validate();
  for (double v : z)
    if (!std::isfinite(v)) throw InvalidArgument("propose: non-finite feature");
  std::array<double, kHiddenDim> h1{}, h2{};
  for (std::size_t i = 0; i < kHiddenDim; ++i) {
    double acc = params.b1(i, 0);
    for (std::size_t j = 0; j < kPairFeatureDim; ++j) acc += params.w1(i, j) * z[j];
    h1[i] = std::max(acc, 0.0);
  }
  for (std::size_t i = 0; i < kHiddenDim; ++i) {
    double acc = params.b2(i, 0);
    for (std::size_t j = 0; j < kHiddenDim; ++j) acc += params.w2(i, j) * h1[j];
    h2[i] = std::max(acc, 0.0);
  }
  std::array<double, kProposalDim> out{};
  for (std::size_t i = 0; i < kProposalDim; ++i) {
    double acc = params.b3(i, 0);
    for (std::size_t j = 0; j < kHiddenDim; ++j) acc += params.w3(i, j) * h2[j];
    out[i] = acc;
  }
  return proposal_from_raw(out);
}

namespace {

void softmax_inplace(std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& x : v) sum += (x = std::exp(x - mx));
  for (double& x : v) x /= sum;
}

}  // namespace

std::vector<double> attention_weights(const EgoFeatures& ego, std::span<const RelFeatures> rel,
                                      const FusionParams& params) {
  std::array<double, kAttentionDim> qe{};
  for (std::size_t i = 0; i < kAttentionDim; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < kEgoFeatureDim; ++j) acc += params.q(i, j) * ego[j];
    qe[i] = acc;
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(kAttentionDim));
  std::vector<double> logits(rel.size());
  for (std::size_t p = 0; p < rel.size(); ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < kAttentionDim; ++i) {
      double kr = 0.0;
      for (std::size_t j = 0; j < kRelFeatureDim; ++j) kr += params.k(i, j) * rel[p][j];
      acc += qe[i] * kr;
    }
    logits[p] = acc * scale;
  }
  if (!logits.empty()) softmax_inplace(logits);
  return logits;
}

std::optional<PooledProposal> pool(std::span<const Proposal> proposals, Pooling mode, const EgoFeatures& ego,
                                   std::span<const RelFeatures> rel, const FusionParams& params) {
  if (proposals.empty()) return std::nullopt;
  PooledProposal out;
  if (mode == Pooling::Attention) {
    if (rel.size() != proposals.size()) throw InvalidArgument("pool: one relative feature per proposal required");
    out.weights = attention_weights(ego, rel, params);
  } else {
    out.weights.assign(proposals.size(), 1.0 / static_cast<double>(proposals.size()));
  }
  Proposal& u = out.proposal;
  Quat rot{0.0, 0.0, 0.0, 0.0};
  const Quat& ref = proposals.front().rotation;
  for (std::size_t j = 0; j < proposals.size(); ++j) {
    const double w = out.weights[j];
    const Proposal& p = proposals[j];
    for (int a = 0; a < 3; ++a) {
      u.delta_mean[a] += w * p.delta_mean[a];
      u.scale[a] += w * p.scale[a];
    }
    const double s = p.rotation.dot(ref) < 0.0 ? -w : w;
    rot.w += s * p.rotation.w;
    rot.x += s * p.rotation.x;
    rot.y += s * p.rotation.y;
    rot.z += s * p.rotation.z;
    u.opacity += w * p.opacity;
    for (std::size_t c = 0; c < kNumClasses; ++c) u.semantics[c] += w * p.semantics[c];
  }
  const double n = rot.norm();
  u.rotation = Quat{rot.w / n, rot.x / n, rot.y / n, rot.z / n};
  return out;
}

double confidence(const Semantics& v, double epsilon) {
  double sum = 0.0, mx = 0.0;
  for (double x : v) {
    sum += x;
    mx = std::max(mx, x);
  }
  return mx / (sum + epsilon);
}

double blend_alpha(const Semantics& ego, const Semantics& pooled, double epsilon) {
  const double a = confidence(ego, epsilon);
  const double b = confidence(pooled, epsilon);
  if (a + b == 0.0) return 0.5;
  return a / (a + b);
}

SemanticGaussian update_ego(const SemanticGaussian& ego, const Proposal& u, double epsilon) {
  SemanticGaussian out;
  out.mean = ego.mean + u.delta_mean;
  out.scale = u.scale;
  out.rotation = canonicalize_quaternion(u.rotation);
  out.opacity = std::clamp(u.opacity, 0.0, 1.0);
  const double alpha = blend_alpha(ego.semantics, u.semantics, epsilon);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    out.semantics[c] = alpha * ego.semantics[c] + (1.0 - alpha) * u.semantics[c];
  }
  return out;
}

std::vector<SemanticGaussian> fuse_scene(std::span<const SemanticGaussian> ego,
                                         std::span<const SemanticGaussian> received, const FusionConfig& cfg,
                                         const FusionParams& params) {
  FusionGraph graph;
  return graph.forward(ego, received, cfg, params);
}

std::vector<SemanticGaussian> unmatched_received(std::span<const SemanticGaussian> ego,
                                                 std::span<const SemanticGaussian> received, double rho) {
  const std::vector<Vec3> means = means_of(ego);
  const SpatialHashGrid grid(means, rho);
  std::vector<SemanticGaussian> out;
  for (const auto& g : received)
    if (!grid.any_within(g.mean, rho)) out.push_back(g);
  return out;
}

std::vector<SemanticGaussian> fused_render_set(std::span<const SemanticGaussian> fused_ego,
                                               std::span<const SemanticGaussian> ego,
                                               std::span<const SemanticGaussian> received,
                                               const FusionConfig& cfg) {
  std::vector<SemanticGaussian> out(fused_ego.begin(), fused_ego.end());
  switch (cfg.received_policy) {
    case ReceivedPolicy::Discard:
      break;
    case ReceivedPolicy::KeepUnmatched: {
      const auto extra = unmatched_received(ego, received, cfg.radius_rho);
      out.insert(out.end(), extra.begin(), extra.end());
      break;
    }
    case ReceivedPolicy::KeepAll:
      out.insert(out.end(), received.begin(), received.end());
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batched graph

namespace {

void add_bias_rows(std::vector<double>& m, std::size_t rows, const Tensor& bias) {
  const std::size_t cols = bias.rows;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r * cols + c] += bias.data[c];
}

void relu(const std::vector<double>& in, std::vector<double>& out) {
  out.resize(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::max(in[i], 0.0);
}

// Index of the max entry, lowest index on ties.
std::size_t argmax(const Semantics& v) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < v.size(); ++c)
    if (v[c] > v[best]) best = c;
  return best;
}

double canonical_sign(const Quat& q) {
  double lead = q.w;
  if (lead == 0.0) lead = q.x != 0.0 ? q.x : (q.y != 0.0 ? q.y : q.z);
  return lead < 0.0 ? -1.0 : 1.0;
}

}  // namespace

std::vector<SemanticGaussian> FusionGraph::forward(std::span<const SemanticGaussian> ego,
                                                   std::span<const SemanticGaussian> received,
                                                   const FusionConfig& cfg, const FusionParams& params) {
  cfg.validate();
  params.validate();
  const auto& kern = kernels::active();
  recorded_ = false;
  cfg_ = cfg;
  params_ = &params;
  ego_.assign(ego.begin(), ego.end());

  const std::vector<Vec3> means = means_of(received);
  const SpatialHashGrid grid(means, cfg.radius_rho);
  pair_begin_.assign(ego.size() + 1, 0);
  pair_ego_.clear();
  std::vector<std::uint32_t> pair_nb;
  for (std::size_t k = 0; k < ego.size(); ++k) {
    pair_begin_[k] = static_cast<std::uint32_t>(pair_ego_.size());
    for (std::uint32_t j : grid.query(ego[k].mean, cfg.radius_rho, cfg.max_neighbors)) {
      pair_ego_.push_back(static_cast<std::uint32_t>(k));
      pair_nb.push_back(j);
    }
  }
  pair_begin_[ego.size()] = static_cast<std::uint32_t>(pair_ego_.size());
  const std::size_t np = pair_ego_.size();

  z_.assign(np * kPairFeatureDim, 0.0);
  for (std::size_t p = 0; p < np; ++p) {
    const PairFeatures z = pairwise_features(ego[pair_ego_[p]], received[pair_nb[p]]);
    std::copy(z.begin(), z.end(), z_.begin() + p * kPairFeatureDim);
  }

  a1_.assign(np * kHiddenDim, 0.0);
  a2_.assign(np * kHiddenDim, 0.0);
  out_.assign(np * kProposalDim, 0.0);
  if (np > 0) {
    kern.gemm_nt(np, kHiddenDim, kPairFeatureDim, z_.data(), kPairFeatureDim, params.w1.data.data(),
                 kPairFeatureDim, a1_.data(), kHiddenDim, false);
    add_bias_rows(a1_, np, params.b1);
    relu(a1_, h1_);
    kern.gemm_nt(np, kHiddenDim, kHiddenDim, h1_.data(), kHiddenDim, params.w2.data.data(), kHiddenDim, a2_.data(),
                 kHiddenDim, false);
    add_bias_rows(a2_, np, params.b2);
    relu(a2_, h2_);
    kern.gemm_nt(np, kProposalDim, kHiddenDim, h2_.data(), kHiddenDim, params.w3.data.data(), kHiddenDim,
                 out_.data(), kProposalDim, false);
    add_bias_rows(out_, np, params.b3);
  } else {
    h1_.clear();
    h2_.clear();
  }

  const bool attention = cfg.pooling == Pooling::Attention;
  qe_.assign(ego.size() * kAttentionDim, 0.0);
  kr_.assign(np * kAttentionDim, 0.0);
  if (attention && np > 0) {
    std::vector<double> ef(ego.size() * kEgoFeatureDim);
    for (std::size_t k = 0; k < ego.size(); ++k) {
      const EgoFeatures e = ego_features(ego[k]);
      std::copy(e.begin(), e.end(), ef.begin() + k * kEgoFeatureDim);
    }
    kern.gemm_nt(ego.size(), kAttentionDim, kEgoFeatureDim, ef.data(), kEgoFeatureDim, params.q.data.data(),
                 kEgoFeatureDim, qe_.data(), kAttentionDim, false);
    kern.gemm_nt(np, kAttentionDim, kRelFeatureDim, z_.data() + kEgoFeatureDim, kPairFeatureDim,
                 params.k.data.data(), kRelFeatureDim, kr_.data(), kAttentionDim, false);
  }

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(kAttentionDim));
  weights_.assign(np, 0.0);
  sign_.assign(np, 1.0);
  pooled_sem_.assign(ego.size(), Semantics{});
  pooled_rot_raw_.assign(ego.size(), Quat{});
  rot_sign_.assign(ego.size(), 1.0);

  std::vector<SemanticGaussian> fused(ego.begin(), ego.end());
  std::vector<double> logits;
  for (std::size_t k = 0; k < ego.size(); ++k) {
    const std::size_t b = pair_begin_[k], e = pair_begin_[k + 1];
    if (b == e) continue;
    const std::size_t n = e - b;
    if (attention) {
      logits.assign(n, 0.0);
      for (std::size_t p = b; p < e; ++p) {
        logits[p - b] = kern.dot(kAttentionDim, qe_.data() + k * kAttentionDim, kr_.data() + p * kAttentionDim) *
                        inv_sqrt_d;
      }
      softmax_inplace(logits);
      std::copy(logits.begin(), logits.end(), weights_.begin() + b);
    } else {
      std::fill(weights_.begin() + b, weights_.begin() + e, 1.0 / static_cast<double>(n));
    }
    Proposal u;
    Quat rot{0.0, 0.0, 0.0, 0.0};
    Quat ref{};
    for (std::size_t p = b; p < e; ++p) {
      const Proposal prop = proposal_from_raw(std::span<const double, kProposalDim>(out_.data() + p * kProposalDim, kProposalDim));
      const double w = weights_[p];
      if (p == b) ref = prop.rotation;
      sign_[p] = prop.rotation.dot(ref) < 0.0 ? -1.0 : 1.0;
      for (int a = 0; a < 3; ++a) {
        u.delta_mean[a] += w * prop.delta_mean[a];
        u.scale[a] += w * prop.scale[a];
      }
      const double s = sign_[p] * w;
      rot.w += s * prop.rotation.w;
      rot.x += s * prop.rotation.x;
      rot.y += s * prop.rotation.y;
      rot.z += s * prop.rotation.z;
      u.opacity += w * prop.opacity;
      for (std::size_t c = 0; c < kNumClasses; ++c) u.semantics[c] += w * prop.semantics[c];
    }
    const double rn = rot.norm();
    u.rotation = Quat{rot.w / rn, rot.x / rn, rot.y / rn, rot.z / rn};
    pooled_sem_[k] = u.semantics;
    pooled_rot_raw_[k] = rot;
    rot_sign_[k] = canonical_sign(u.rotation);
    fused[k] = update_ego(ego[k], u, cfg.epsilon);
  }
  recorded_ = true;
  return fused;
}

FusionParams FusionGraph::backward(std::span<const GaussianGrad> grad_fused) const {
  if (!recorded_ || params_ == nullptr) throw StateError("fusion backward called before a recorded forward pass");
  if (grad_fused.size() != ego_.size()) throw InvalidArgument("fusion backward: one gradient per ego Gaussian required");
  const FusionParams& params = *params_;
  const auto& kern = kernels::active();
  const std::size_t np = pair_ego_.size();
  const bool attention = cfg_.pooling == Pooling::Attention;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(kAttentionDim));

  FusionParams grad;
  for (Tensor* t : grad.tensors()) std::fill(t->data.begin(), t->data.end(), 0.0);
  if (np == 0) return grad;

  std::vector<double> g_out(np * kProposalDim, 0.0);
  std::vector<double> g_qe(ego_.size() * kAttentionDim, 0.0);
  std::vector<double> g_kr(np * kAttentionDim, 0.0);
  std::vector<double> g_w;

  for (std::size_t k = 0; k < ego_.size(); ++k) {
    const std::size_t b = pair_begin_[k], e = pair_begin_[k + 1];
    if (b == e) continue;
    const GaussianGrad& g = grad_fused[k];

    // Rotation: r_hat = sign * rho / |rho|.
    const Quat& rho = pooled_rot_raw_[k];
    const double rn = rho.norm();
    const Quat nq{rho.w / rn, rho.x / rn, rho.y / rn, rho.z / rn};
    const Quat gn{rot_sign_[k] * g.rotation.w, rot_sign_[k] * g.rotation.x, rot_sign_[k] * g.rotation.y,
                  rot_sign_[k] * g.rotation.z};
    const double ndg = nq.dot(gn);
    const Quat g_rho{(gn.w - nq.w * ndg) / rn, (gn.x - nq.x * ndg) / rn, (gn.y - nq.y * ndg) / rn,
                     (gn.z - nq.z * ndg) / rn};

    // Semantics: c_hat = alpha c + (1 - alpha) c_bar.
    const Semantics& c = ego_[k].semantics;
    const Semantics& cbar = pooled_sem_[k];
    const double eps = cfg_.epsilon;
    const double ca = confidence(c, eps);
    const double cb = confidence(cbar, eps);
    const double alpha = (ca + cb) == 0.0 ? 0.5 : ca / (ca + cb);
    Semantics g_cbar{};
    double g_alpha = 0.0;
    for (std::size_t i = 0; i < kNumClasses; ++i) {
      g_cbar[i] = (1.0 - alpha) * g.semantics[i];
      g_alpha += g.semantics[i] * (c[i] - cbar[i]);
    }
    if ((ca + cb) != 0.0) {
      const double g_cb = g_alpha * (-ca / ((ca + cb) * (ca + cb)));
      double sum = 0.0;
      for (double v : cbar) sum += v;
      const std::size_t imax = argmax(cbar);
      const double denom = sum + eps;
      for (std::size_t i = 0; i < kNumClasses; ++i) g_cbar[i] += g_cb * (-cbar[imax] / (denom * denom));
      g_cbar[imax] += g_cb / denom;
    }

    g_w.assign(e - b, 0.0);
    for (std::size_t p = b; p < e; ++p) {
      const double* o = out_.data() + p * kProposalDim;
      double* go = g_out.data() + p * kProposalDim;
      const Proposal prop = proposal_from_raw(std::span<const double, kProposalDim>(o, kProposalDim));
      const double w = weights_[p];
      double gw = 0.0;
      for (int a = 0; a < 3; ++a) {
        go[raw::kDeltaMean + a] = w * g.mean[a];
        go[raw::kScale + a] = w * g.scale[a] * sigmoid(o[raw::kScale + a]);
        gw += g.mean[a] * prop.delta_mean[a] + g.scale[a] * prop.scale[a];
      }
      // r_p = (o_r + e0) / |o_r + e0|, entering the pooled sum with sign_p.
      const Quat qraw{o[raw::kRotation] + 1.0, o[raw::kRotation + 1], o[raw::kRotation + 2], o[raw::kRotation + 3]};
      const double qn = qraw.norm();
      const double s = sign_[p];
      const Quat gr{w * s * g_rho.w, w * s * g_rho.x, w * s * g_rho.y, w * s * g_rho.z};
      const double rdg = prop.rotation.dot(gr);
      go[raw::kRotation + 0] = (gr.w - prop.rotation.w * rdg) / qn;
      go[raw::kRotation + 1] = (gr.x - prop.rotation.x * rdg) / qn;
      go[raw::kRotation + 2] = (gr.y - prop.rotation.y * rdg) / qn;
      go[raw::kRotation + 3] = (gr.z - prop.rotation.z * rdg) / qn;
      gw += s * prop.rotation.dot(g_rho);
      go[raw::kOpacity] = w * g.opacity * prop.opacity * (1.0 - prop.opacity);
      gw += g.opacity * prop.opacity;
      for (std::size_t c2 = 0; c2 < kNumClasses; ++c2) {
        go[raw::kSemantics + c2] = w * g_cbar[c2] * sigmoid(o[raw::kSemantics + c2]);
        gw += g_cbar[c2] * prop.semantics[c2];
      }
      g_w[p - b] = gw;
    }
    if (attention) {
      double mean_gw = 0.0;
      for (std::size_t p = b; p < e; ++p) mean_gw += weights_[p] * g_w[p - b];
      for (std::size_t p = b; p < e; ++p) {
        const double gl = weights_[p] * (g_w[p - b] - mean_gw) * inv_sqrt_d;
        kern.axpy(kAttentionDim, gl, kr_.data() + p * kAttentionDim, g_qe.data() + k * kAttentionDim);
        kern.axpy(kAttentionDim, gl, qe_.data() + k * kAttentionDim, g_kr.data() + p * kAttentionDim);
      }
    }
  }

  if (attention) {
    std::vector<double> ef(ego_.size() * kEgoFeatureDim);
    for (std::size_t k = 0; k < ego_.size(); ++k) {
      const EgoFeatures f = ego_features(ego_[k]);
      std::copy(f.begin(), f.end(), ef.begin() + k * kEgoFeatureDim);
    }
    kern.gemm_tn(kAttentionDim, kEgoFeatureDim, ego_.size(), g_qe.data(), kAttentionDim, ef.data(), kEgoFeatureDim,
                 grad.q.data.data(), kEgoFeatureDim);
    kern.gemm_tn(kAttentionDim, kRelFeatureDim, np, g_kr.data(), kAttentionDim, z_.data() + kEgoFeatureDim,
                 kPairFeatureDim, grad.k.data.data(), kRelFeatureDim);
  }

  // MLP backward.
  kern.gemm_tn(kProposalDim, kHiddenDim, np, g_out.data(), kProposalDim, h2_.data(), kHiddenDim, grad.w3.data.data(),
               kHiddenDim);
  for (std::size_t p = 0; p < np; ++p)
    for (std::size_t i = 0; i < kProposalDim; ++i) grad.b3.data[i] += g_out[p * kProposalDim + i];

  std::vector<double> g_h(np * kHiddenDim, 0.0);
  kern.gemm_nn(np, kHiddenDim, kProposalDim, g_out.data(), kProposalDim, params.w3.data.data(), kHiddenDim,
               g_h.data(), kHiddenDim);
  for (std::size_t i = 0; i < g_h.size(); ++i)
    if (a2_[i] <= 0.0) g_h[i] = 0.0;
  kern.gemm_tn(kHiddenDim, kHiddenDim, np, g_h.data(), kHiddenDim, h1_.data(), kHiddenDim, grad.w2.data.data(),
               kHiddenDim);
  for (std::size_t p = 0; p < np; ++p)
    for (std::size_t i = 0; i < kHiddenDim; ++i) grad.b2.data[i] += g_h[p * kHiddenDim + i];

  std::vector<double> g_h1(np * kHiddenDim, 0.0);
  kern.gemm_nn(np, kHiddenDim, kHiddenDim, g_h.data(), kHiddenDim, params.w2.data.data(), kHiddenDim, g_h1.data(),
               kHiddenDim);
  for (std::size_t i = 0; i < g_h1.size(); ++i)
    if (a1_[i] <= 0.0) g_h1[i] = 0.0;
  kern.gemm_tn(kHiddenDim, kPairFeatureDim, np, g_h1.data(), kHiddenDim, z_.data(), kPairFeatureDim,
               grad.w1.data.data(), kPairFeatureDim);
  for (std::size_t p = 0; p < np; ++p)
    for (std::size_t i = 0; i < kHiddenDim; ++i) grad.b1.data[i] += g_h1[p * kHiddenDim + i];

  return grad;
}

}  // namespace gscollab
