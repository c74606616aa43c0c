#pragma once

// Synthetic multi-agent scenes: box-primitive worlds rasterized into a world
// voxel grid, agents with known poses, visibility by voxel raycasting, and
// noisy Gaussian observations standing in for a learned image encoder.
// Episodes package, transmit and combine the observations per run mode.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gscollab/comms.hpp"
#include "gscollab/core.hpp"
#include "gscollab/fusion.hpp"
#include "gscollab/learn.hpp"
#include "gscollab/metrics.hpp"
#include "gscollab/splat.hpp"
#include "gscollab/voxel_grid.hpp"

namespace gscollab {

enum class ObjectKind { Ground, Sidewalk, Building, Vehicle, Wall, Pole, Sign };
const char* to_string(ObjectKind k);
ObjectKind object_kind_from_string(std::string_view s);

/// Oriented box: center and full size in meters, yaw about +z.
struct SceneObject {
  ObjectKind kind = ObjectKind::Building;
  Vec3 center{};
  Vec3 size{0.4, 0.4, 0.4};
  double yaw = 0.0;
  std::uint8_t cls = cls::kBuilding;

  bool contains(const Vec3& p) const;
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct AgentPose {
  std::uint32_t id = 0;
  RigidTransform pose;  // agent frame -> world frame

  friend bool operator==(const AgentPose& a, const AgentPose& b) {
    return a.id == b.id && a.pose.rotation == b.pose.rotation && a.pose.translation == b.pose.translation;
  }
};

enum class Occlusion { Raycast, None };

struct ObservationModel {
  std::size_t gaussians_per_agent = 25600;
  double position_noise = 0.08;     // sigma, meters, per world axis
  double scale_jitter = 0.2;        // sigma of the log-scale perturbation
  double label_flip = 0.15;         // probability of a wrong semantic class
  double semantic_strength = 4.0;   // weight of the observed class
  double semantic_floor = 0.02;     // weight of every other semantic class
  double opacity_near = 0.95;
  double opacity_falloff = 80.0;    // meters; opacity = near * exp(-range / falloff)
  double spurious_fraction = 0.05;  // Gaussians placed in free space next to surfaces
  double sensor_height = 1.5;
  Occlusion occlusion = Occlusion::Raycast;

  void validate() const;
  friend bool operator==(const ObservationModel&, const ObservationModel&) = default;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  Vec3 world_min{-36.0, -36.0, -1.6};
  Vec3 world_max{36.0, 36.0, 1.6};
  double voxel_size = 0.4;
  std::vector<SceneObject> objects;
  std::vector<AgentPose> agents;
  ObservationModel observation;

  /// Throws Error(SpecError) on bad extents, out-of-world objects, empty-class
  /// objects, fewer than 1 or more than 7 agents, or duplicate agent ids.
  void validate() const;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

/// JSON scene description; errors carry line and column (syntax) or the
/// offending field path (schema). Throws Error(ConfigError).
SceneSpec parse_scene_spec(std::string_view text);
std::string scene_spec_to_json(const SceneSpec& spec);

/// Applies the fields present in a JSON object onto `base` and validates the
/// result. Throws Error(ConfigError).
ObservationModel parse_observation_model(std::string_view text, const ObservationModel& base = {});
/// Compact JSON object with every field.
std::string observation_model_to_json(const ObservationModel& m);

struct GeneratorConfig {
  std::size_t num_agents = 3;
  double half_extent = 36.0;
};

/// Street scene: terrain, sidewalks and one or two roads, buildings, walls,
/// poles with signs, vegetation, pedestrians, parked vehicles, and agent
/// vehicles on the road. Agent poses sit on the voxel lattice with yaw a
/// multiple of 90 degrees, so agent grids share voxel boundaries with the
/// world grid.
SceneSpec generate_scene(std::uint64_t seed, const GeneratorConfig& cfg = {});

/// A validated spec with its rasterized world (labels in the world frame;
/// later objects overwrite earlier ones).
class Scene {
 public:
  explicit Scene(SceneSpec spec);

  const SceneSpec& spec() const { return spec_; }
  const LabelGrid& world() const { return world_; }
  std::size_t num_agents() const { return spec_.agents.size(); }
  const AgentPose& agent(std::size_t i) const { return spec_.agents.at(i); }
  Vec3 sensor_position(std::size_t agent) const;

 private:
  SceneSpec spec_;
  LabelGrid world_;
};

/// World-grid voxel face: face = 0..5 for -x, +x, -y, +y, -z, +z.
struct VoxelFace {
  std::size_t voxel = 0;
  std::uint8_t face = 0;
  friend bool operator==(const VoxelFace&, const VoxelFace&) = default;
};

/// True when the segment crosses no occupied world voxel (3D DDA).
bool segment_clear(const LabelGrid& world, const Vec3& from, const Vec3& to);

/// Exposed faces of occupied voxels inside the agent's ROI, filtered by
/// line of sight from the sensor when occlusion is raycast. Sorted by voxel
/// index then face.
std::vector<VoxelFace> visible_faces(const Scene& scene, std::size_t agent, Occlusion occlusion);

/// Per-world-voxel flag: occupied and seen by the agent.
std::vector<std::uint8_t> visible_voxels(const Scene& scene, std::size_t agent, Occlusion occlusion);

struct GroundTruth {
  std::vector<LabelGrid> per_agent;      // what each agent sees, in its own grid
  std::vector<LabelGrid> collaborative;  // union over all agents, in each agent's grid
};

GroundTruth build_ground_truth(const Scene& scene, Occlusion occlusion = Occlusion::Raycast);

/// Observations in the world frame. Noise is drawn in the world frame from
/// a stream derived from (scene seed, agent id).
std::vector<SemanticGaussian> observe_world(const Scene& scene, std::size_t agent, const ObservationModel& model);
/// The same observations expressed in the agent frame.
std::vector<SemanticGaussian> observe(const Scene& scene, std::size_t agent, const ObservationModel& model);

/// Fixed free-space prior: opacity 1, one-hot empty class, isotropic 20 m,
/// centered on the ROI. Never transmitted or fused.
SemanticGaussian empty_space_gaussian(const Roi& roi = {});

enum class Mode { Single, ZeroShot, Naive, Learned };
const char* to_string(Mode m);
Mode mode_from_string(std::string_view s);

struct EpisodeConfig {
  FusionConfig fusion;
  SplatConfig splat;
  WirePrecision precision = WirePrecision::Fp16;
  std::optional<std::uint64_t> budget_bytes;
  std::uint32_t frame_tag = 0;
  bool keep_messages = false;  // retain the serialized messages
  bool empty_gaussian = true;
};

struct SentMessage {
  std::uint32_t sender = 0;
  std::uint32_t receiver = 0;
  bool accepted = false;
  std::vector<std::uint8_t> bytes;
};

/// Everything the run modes share: own observations, what each agent
/// received over the wire (decoded, stacked in sender order), the
/// collaborative ground truth, and the traffic.
struct EpisodeInputs {
  std::vector<std::uint32_t> agent_ids;
  std::vector<std::vector<SemanticGaussian>> own;
  std::vector<std::vector<SemanticGaussian>> received;
  std::vector<LabelGrid> ground_truth;
  CommStats stats;
  std::vector<SentMessage> messages;
  std::vector<SemanticGaussian> extras;  // per agent frame: the empty-space prior
};

EpisodeInputs prepare_episode(const Scene& scene, const ObservationModel& model, const EpisodeConfig& cfg);

struct ModeParams {
  const FusionParams* fusion = nullptr;
  const CalibrationParams* calibration = nullptr;
};

struct EpisodeResult {
  Mode mode = Mode::Single;
  std::vector<ChannelGrid> channels;
  std::vector<LabelGrid> predictions;
  CommStats stats;  // empty for single mode
  IouCounts counts;
};

/// Throws InvalidArgument when learned mode lacks fusion params or naive
/// mode lacks calibration params.
EpisodeResult run_mode(const EpisodeInputs& inputs, Mode mode, const EpisodeConfig& cfg, const ModeParams& params);
EpisodeResult run_episode(const Scene& scene, const ObservationModel& model, Mode mode, const EpisodeConfig& cfg,
                          const ModeParams& params = {});

/// One training sample per agent.
std::vector<TrainSample> training_samples(const EpisodeInputs& inputs);

}  // namespace gscollab
