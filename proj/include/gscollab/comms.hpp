#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "gscollab/core.hpp"

namespace gscollab {

/// Re-expresses a Gaussian in another frame: m' = U m + t, s' = s,
/// r' = canonicalize(q (x) r); opacity and semantics are unchanged.
SemanticGaussian transform_gaussian(const SemanticGaussian& g, const RigidTransform& t);

/// Transforms every Gaussian and keeps those whose transformed mean lies in
/// the (closed) ROI box. Order is preserved.
std::vector<SemanticGaussian> cull_to_roi(std::span<const SemanticGaussian> gaussians, const RigidTransform& t,
                                          const Roi& roi);

/// Ego Gaussians first, then each received set in the given order (callers
/// pass them sorted by sender id).
std::vector<SemanticGaussian> stack(std::span<const SemanticGaussian> ego,
                                    std::span<const std::vector<SemanticGaussian>> received);

enum class WirePrecision : std::uint16_t { Fp16 = 0, Fp32 = 1 };

inline constexpr std::size_t kGmsgHeaderSize = 24;
inline constexpr std::size_t kScalarsPerGaussian = 24;
inline constexpr std::uint16_t kGmsgVersion = 1;

constexpr std::size_t record_size(WirePrecision p) {
  return kScalarsPerGaussian * (p == WirePrecision::Fp16 ? 2 : 4);
}

/// A packaged set of Gaussians from one agent to another. Wire layout
/// (little-endian): "GMSG", u16 version, u16 precision code, u32 sender,
/// u32 receiver, u32 frame tag, u32 count; then `count` records of 24
/// scalars (mean 3, scale 3, quaternion w,x,y,z, opacity, semantics 13).
struct GaussianMessage {
  std::uint32_t sender_id = 0;
  std::uint32_t receiver_id = 0;
  std::uint32_t frame_tag = 0;
  WirePrecision precision = WirePrecision::Fp16;
  std::vector<SemanticGaussian> gaussians;

  std::size_t byte_size() const { return kGmsgHeaderSize + gaussians.size() * record_size(precision); }
};

/// Throws InvalidArgument if a field does not fit the chosen precision.
std::vector<std::uint8_t> serialize_message(const GaussianMessage& msg);

/// Decodes and re-establishes Gaussian invariants after quantization
/// (quaternion renormalized and canonicalized, scale floored at the
/// smallest positive value of the wire precision, opacity clamped to [0,1]).
/// Throws DecodeError: BadMagic, VersionMismatch, Truncated, NonFinite,
/// BadField or TrailingBytes.
GaussianMessage deserialize_message(std::span<const std::uint8_t> bytes);

/// Rounds every field through the wire precision, as a receiver would see it.
SemanticGaussian quantize(const SemanticGaussian& g, WirePrecision p);

struct LinkStats {
  std::uint64_t messages = 0;
  std::uint64_t gaussians = 0;
  std::uint64_t bytes = 0;
  std::uint64_t rejected = 0;
};

/// Communication volume accounting. Accepted messages only count towards
/// the totals; rejected ones are tallied per link.
class CommStats {
 public:
  void record(const GaussianMessage& msg);
  void record_rejected(const GaussianMessage& msg);
  void merge(const CommStats& other);

  std::uint64_t messages_sent() const { return messages_; }
  std::uint64_t gaussians_sent() const { return gaussians_; }
  std::uint64_t bytes_sent() const { return bytes_; }
  const std::map<std::pair<std::uint32_t, std::uint32_t>, LinkStats>& links() const { return links_; }

 private:
  std::uint64_t messages_ = 0;
  std::uint64_t gaussians_ = 0;
  std::uint64_t bytes_ = 0;
  std::map<std::pair<std::uint32_t, std::uint32_t>, LinkStats> links_;
};

struct VolumeSummary {
  std::uint64_t total_bytes = 0;
  double mean_bytes_per_message = 0.0;
  /// Average bytes received per receiving agent.
  double mean_bytes_per_receiver = 0.0;
};

VolumeSummary communication_volume(const CommStats& stats);

/// Accepts iff the message's byte length is <= budget; no budget accepts all.
bool enforce_budget(const GaussianMessage& msg, std::optional<std::uint64_t> budget_bytes);

}  // namespace gscollab
