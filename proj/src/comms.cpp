#include "gscollab/comms.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>

#include "gscollab/bytes.hpp"

namespace gscollab {

SemanticGaussian transform_gaussian(const SemanticGaussian& g, const RigidTransform& t) {
  SemanticGaussian out = g;
  out.mean = t.apply(g.mean);
  out.rotation = canonicalize_quaternion(quat_multiply(t.rotation, g.rotation));
  return out;
}

std::vector<SemanticGaussian> cull_to_roi(std::span<const SemanticGaussian> gaussians, const RigidTransform& t,
                                          const Roi& roi) {
  std::vector<SemanticGaussian> out;
  for (const auto& g : gaussians) {
    SemanticGaussian moved = transform_gaussian(g, t);
    if (roi.contains(moved.mean)) out.push_back(moved);
  }
  return out;
}

std::vector<SemanticGaussian> stack(std::span<const SemanticGaussian> ego,
                                    std::span<const std::vector<SemanticGaussian>> received) {
  std::size_t total = ego.size();
  for (const auto& r : received) total += r.size();
  std::vector<SemanticGaussian> out;
  out.reserve(total);
  out.insert(out.end(), ego.begin(), ego.end());
  for (const auto& r : received) out.insert(out.end(), r.begin(), r.end());
  return out;
}

namespace {

template <typename Fn>
void for_each_scalar(const SemanticGaussian& g, Fn&& fn) {
  for (double v : g.mean) fn(v);
  for (double v : g.scale) fn(v);
  fn(g.rotation.w);
  fn(g.rotation.x);
  fn(g.rotation.y);
  fn(g.rotation.z);
  fn(g.opacity);
  for (double v : g.semantics) fn(v);
}

double wire_round(double v, WirePrecision p) {
  const float f = static_cast<float>(v);
  return p == WirePrecision::Fp16 ? half_to_float(float_to_half(f)) : f;
}

double smallest_positive(WirePrecision p) {
  return p == WirePrecision::Fp16 ? 5.9604644775390625e-08 : std::numeric_limits<float>::denorm_min();
}

// Re-establishes the core invariants on a Gaussian read back from the wire.
SemanticGaussian restore_invariants(const double* s, WirePrecision p) {
  SemanticGaussian g;
  for (int i = 0; i < 3; ++i) g.mean[i] = s[i];
  for (int i = 0; i < 3; ++i) g.scale[i] = std::max(s[3 + i], smallest_positive(p));
  const Quat raw{s[6], s[7], s[8], s[9]};
  if (!(raw.norm() > 0.0)) throw DecodeError(DecodeFailure::BadField, "gmsg: zero rotation quaternion");
  g.rotation = canonicalize_quaternion(raw);
  g.opacity = std::clamp(s[10], 0.0, 1.0);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (s[11 + c] < 0.0) throw DecodeError(DecodeFailure::BadField, "gmsg: negative semantic weight");
    g.semantics[c] = s[11 + c];
  }
  return g;
}

}  // namespace

SemanticGaussian quantize(const SemanticGaussian& g, WirePrecision p) {
  double s[kScalarsPerGaussian];
  std::size_t n = 0;
  for_each_scalar(g, [&](double v) { s[n++] = v; });
  // Rounded in a separate pass: GCC 11 at -O3 mis-vectorizes the fused
  // gather-and-round loop and skips the conversion of the first two means.
  for (double& v : s) v = wire_round(v, p);
  return restore_invariants(s, p);
}

std::vector<std::uint8_t> serialize_message(const GaussianMessage& msg) {
  if (msg.precision != WirePrecision::Fp16 && msg.precision != WirePrecision::Fp32) {
    throw InvalidArgument("gmsg: unknown precision");
  }
  ByteWriter w;
  w.put_bytes("GMSG");
  w.put_u16(kGmsgVersion);
  w.put_u16(static_cast<std::uint16_t>(msg.precision));
  w.put_u32(msg.sender_id);
  w.put_u32(msg.receiver_id);
  w.put_u32(msg.frame_tag);
  w.put_u32(static_cast<std::uint32_t>(msg.gaussians.size()));
  for (const auto& g : msg.gaussians) {
    for_each_scalar(g, [&](double v) {
      const float f = static_cast<float>(v);
      if (!std::isfinite(v) || !std::isfinite(f)) throw InvalidArgument("gmsg: field is not finite at f32");
      if (msg.precision == WirePrecision::Fp16) {
        const std::uint16_t h = float_to_half(f);
        if ((h & 0x7c00u) == 0x7c00u) throw InvalidArgument("gmsg: field overflows fp16 (" + std::to_string(v) + ")");
        w.put_u16(h);
      } else {
        w.put_f32(f);
      }
    });
  }
  return std::move(w).take();
}

GaussianMessage deserialize_message(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (!r.take_magic("GMSG")) throw DecodeError(DecodeFailure::BadMagic, "gmsg: bad magic");
  const std::uint16_t version = r.u16();
  if (version != kGmsgVersion) {
    throw DecodeError(DecodeFailure::VersionMismatch, "gmsg: unsupported version " + std::to_string(version));
  }
  const std::uint16_t code = r.u16();
  if (code > 1) throw DecodeError(DecodeFailure::BadField, "gmsg: unknown precision code " + std::to_string(code));
  GaussianMessage msg;
  msg.precision = static_cast<WirePrecision>(code);
  msg.sender_id = r.u32();
  msg.receiver_id = r.u32();
  msg.frame_tag = r.u32();
  const std::uint32_t count = r.u32();
  const std::size_t rec = record_size(msg.precision);
  r.need(std::size_t{count} * rec, "gaussian records");
  msg.gaussians.reserve(count);
  double s[kScalarsPerGaussian];
  for (std::uint32_t n = 0; n < count; ++n) {
    for (double& v : s) {
      v = msg.precision == WirePrecision::Fp16 ? r.f16() : r.f32();
      if (!std::isfinite(v)) throw DecodeError(DecodeFailure::NonFinite, "gmsg: non-finite field in record " + std::to_string(n));
    }
    msg.gaussians.push_back(restore_invariants(s, msg.precision));
  }
  if (r.remaining() != 0) throw DecodeError(DecodeFailure::TrailingBytes, "gmsg: trailing bytes after records");
  return msg;
}

void CommStats::record(const GaussianMessage& msg) {
  const std::uint64_t b = msg.byte_size();
  ++messages_;
  gaussians_ += msg.gaussians.size();
  bytes_ += b;
  LinkStats& l = links_[{msg.sender_id, msg.receiver_id}];
  ++l.messages;
  l.gaussians += msg.gaussians.size();
  l.bytes += b;
}

void CommStats::record_rejected(const GaussianMessage& msg) { ++links_[{msg.sender_id, msg.receiver_id}].rejected; }

void CommStats::merge(const CommStats& other) {
  messages_ += other.messages_;
  gaussians_ += other.gaussians_;
  bytes_ += other.bytes_;
  for (const auto& [key, l] : other.links_) {
    LinkStats& d = links_[key];
    d.messages += l.messages;
    d.gaussians += l.gaussians;
    d.bytes += l.bytes;
    d.rejected += l.rejected;
  }
}

VolumeSummary communication_volume(const CommStats& stats) {
  VolumeSummary v;
  v.total_bytes = stats.bytes_sent();
  if (stats.messages_sent() > 0) {
    v.mean_bytes_per_message = static_cast<double>(stats.bytes_sent()) / static_cast<double>(stats.messages_sent());
  }
  std::set<std::uint32_t> receivers;
  for (const auto& [key, l] : stats.links()) {
    if (l.messages > 0) receivers.insert(key.second);
  }
  if (!receivers.empty()) v.mean_bytes_per_receiver = static_cast<double>(v.total_bytes) / receivers.size();
  return v;
}

bool enforce_budget(const GaussianMessage& msg, std::optional<std::uint64_t> budget_bytes) {
  return !budget_bytes || msg.byte_size() <= *budget_bytes;
}

}  // namespace gscollab
