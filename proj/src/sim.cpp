#include "gscollab/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "json.hpp"
#include "gscollab/rng.hpp"

namespace gscollab {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

[[noreturn]] void spec_error(const std::string& what) { throw Error(ErrorCode::SpecError, "scene: " + what); }

bool near_multiple(double v, double step) {
  const double r = v / step;
  return std::abs(r - std::round(r)) < 1e-6;
}

}  // namespace

// ---------------------------------------------------------------------------
// Names

const char* to_string(ObjectKind k) {
  switch (k) {
    case ObjectKind::Ground: return "ground";
    case ObjectKind::Sidewalk: return "sidewalk";
    case ObjectKind::Building: return "building";
    case ObjectKind::Vehicle: return "vehicle";
    case ObjectKind::Wall: return "wall";
    case ObjectKind::Pole: return "pole";
    case ObjectKind::Sign: return "sign";
  }
  return "?";
}

ObjectKind object_kind_from_string(std::string_view s) {
  for (ObjectKind k : {ObjectKind::Ground, ObjectKind::Sidewalk, ObjectKind::Building, ObjectKind::Vehicle,
                       ObjectKind::Wall, ObjectKind::Pole, ObjectKind::Sign}) {
    if (s == to_string(k)) return k;
  }
  throw Error(ErrorCode::ConfigError, "unknown object kind '" + std::string(s) + "'");
}

const char* to_string(Mode m) {
  switch (m) {
    case Mode::Single: return "single";
    case Mode::ZeroShot: return "zero_shot";
    case Mode::Naive: return "naive";
    case Mode::Learned: return "learned";
  }
  return "?";
}

Mode mode_from_string(std::string_view s) {
  for (Mode m : {Mode::Single, Mode::ZeroShot, Mode::Naive, Mode::Learned}) {
    if (s == to_string(m)) return m;
  }
  throw Error(ErrorCode::ConfigError, "unknown mode '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Spec

bool SceneObject::contains(const Vec3& p) const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double dx = p[0] - center[0], dy = p[1] - center[1];
  const Vec3 local{c * dx + s * dy, -s * dx + c * dy, p[2] - center[2]};
  for (int a = 0; a < 3; ++a)
    if (!(std::abs(local[a]) < 0.5 * size[a])) return false;
  return true;
}

namespace {

// Half extents of the axis-aligned box around a yawed box.
Vec3 aabb_half(const SceneObject& o) {
  const double c = std::abs(std::cos(o.yaw)), s = std::abs(std::sin(o.yaw));
  return {0.5 * (c * o.size[0] + s * o.size[1]), 0.5 * (s * o.size[0] + c * o.size[1]), 0.5 * o.size[2]};
}

}  // namespace

void ObservationModel::validate() const {
  auto bad = [](const char* what) { throw Error(ErrorCode::SpecError, std::string("observation model: ") + what); };
  if (gaussians_per_agent == 0) bad("gaussians_per_agent must be positive");
  if (!(position_noise >= 0.0) || !(scale_jitter >= 0.0)) bad("noise parameters must be >= 0");
  if (!(label_flip >= 0.0 && label_flip <= 1.0)) bad("label_flip must be in [0,1]");
  if (!(spurious_fraction >= 0.0 && spurious_fraction <= 1.0)) bad("spurious_fraction must be in [0,1]");
  if (!(semantic_strength > 0.0) || !(semantic_floor >= 0.0)) bad("semantic weights must be positive");
  if (!(opacity_near > 0.0 && opacity_near <= 1.0)) bad("opacity_near must be in (0,1]");
  if (!(opacity_falloff > 0.0)) bad("opacity_falloff must be positive");
  if (!std::isfinite(sensor_height)) bad("sensor_height must be finite");
}

void SceneSpec::validate() const {
  if (!(voxel_size > 0.0)) spec_error("voxel_size must be positive");
  for (int a = 0; a < 3; ++a) {
    if (!(world_max[a] > world_min[a])) spec_error("world max must exceed min on every axis");
    if (!near_multiple(world_max[a] - world_min[a], voxel_size)) spec_error("world extents must be whole voxels");
  }
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const SceneObject& o = objects[i];
    const std::string id = "object " + std::to_string(i);
    if (o.cls >= kEmptyClass) spec_error(id + ": class must be a semantic class (0.." + std::to_string(kEmptyClass - 1) + ")");
    for (int a = 0; a < 3; ++a) {
      if (!(o.size[a] > 0.0)) spec_error(id + ": size must be positive");
    }
    const Vec3 h = aabb_half(o);
    for (int a = 0; a < 3; ++a) {
      if (o.center[a] - h[a] < world_min[a] - 1e-6 || o.center[a] + h[a] > world_max[a] + 1e-6) {
        spec_error(id + " (" + to_string(o.kind) + ") lies outside the world extents");
      }
    }
  }
  if (agents.empty() || agents.size() > 7) spec_error("need between 1 and 7 agents");
  for (std::size_t i = 0; i < agents.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (agents[i].id == agents[j].id) spec_error("duplicate agent id " + std::to_string(agents[i].id));
    }
    const Vec3& t = agents[i].pose.translation;
    for (int a = 0; a < 2; ++a) {
      if (t[a] < world_min[a] || t[a] > world_max[a]) spec_error("agent " + std::to_string(agents[i].id) + " outside the world");
    }
  }
  observation.validate();
}

// ---------------------------------------------------------------------------
// JSON

namespace {

using nlohmann::json;

[[noreturn]] void config_error(const std::string& path, const std::string& what) {
  throw Error(ErrorCode::ConfigError, path + ": " + what);
}

const json& field(const json& obj, const std::string& key, const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end()) config_error(path, "missing field '" + key + "'");
  return *it;
}

double number(const json& v, const std::string& path) {
  if (!v.is_number()) config_error(path, "expected a number");
  return v.get<double>();
}

Vec3 vec3(const json& v, const std::string& path) {
  if (!v.is_array() || v.size() != 3) config_error(path, "expected an array of 3 numbers");
  return {number(v[0], path + "[0]"), number(v[1], path + "[1]"), number(v[2], path + "[2]")};
}

std::uint8_t class_id(const json& v, const std::string& path) {
  if (v.is_number_integer()) {
    const auto c = v.get<long long>();
    if (c < 0 || c >= static_cast<long long>(kNumClasses)) config_error(path, "class index out of range");
    return static_cast<std::uint8_t>(c);
  }
  if (v.is_string()) {
    const auto& names = class_names();
    for (std::size_t c = 0; c < kNumClasses; ++c)
      if (v.get<std::string>() == names[c]) return static_cast<std::uint8_t>(c);
    config_error(path, "unknown class '" + v.get<std::string>() + "'");
  }
  config_error(path, "expected a class name or index");
}

template <typename T>
void optional_number(const json& obj, const char* key, T& out, const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  const double v = number(*it, path + "." + key);
  if constexpr (std::is_integral_v<T>) {
    if (v < 0 || v != std::floor(v)) config_error(path + "." + key, "expected a non-negative integer");
  }
  out = static_cast<T>(v);
}

// Rejects keys outside `allowed`, so a misspelled field is an error instead of a no-op.
void allow_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& path) {
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      config_error(path.empty() ? key : path + "." + key, "unknown field");
    }
  }
}

ObservationModel parse_observation(const json& j, const std::string& path, const ObservationModel& base = {}) {
  if (!j.is_object()) config_error(path, "expected an object");
  allow_keys(j,
             {"gaussians_per_agent", "position_noise", "scale_jitter", "label_flip", "semantic_strength",
              "semantic_floor", "opacity_near", "opacity_falloff", "spurious_fraction", "sensor_height", "occlusion"},
             path);
  ObservationModel m = base;
  optional_number(j, "gaussians_per_agent", m.gaussians_per_agent, path);
  optional_number(j, "position_noise", m.position_noise, path);
  optional_number(j, "scale_jitter", m.scale_jitter, path);
  optional_number(j, "label_flip", m.label_flip, path);
  optional_number(j, "semantic_strength", m.semantic_strength, path);
  optional_number(j, "semantic_floor", m.semantic_floor, path);
  optional_number(j, "opacity_near", m.opacity_near, path);
  optional_number(j, "opacity_falloff", m.opacity_falloff, path);
  optional_number(j, "spurious_fraction", m.spurious_fraction, path);
  optional_number(j, "sensor_height", m.sensor_height, path);
  if (auto it = j.find("occlusion"); it != j.end()) {
    if (*it == "raycast") m.occlusion = Occlusion::Raycast;
    else if (*it == "none") m.occlusion = Occlusion::None;
    else config_error(path + ".occlusion", "expected \"raycast\" or \"none\"");
  }
  return m;
}

json observation_json(const ObservationModel& m) {
  return {{"gaussians_per_agent", m.gaussians_per_agent},
          {"position_noise", m.position_noise},
          {"scale_jitter", m.scale_jitter},
          {"label_flip", m.label_flip},
          {"semantic_strength", m.semantic_strength},
          {"semantic_floor", m.semantic_floor},
          {"opacity_near", m.opacity_near},
          {"opacity_falloff", m.opacity_falloff},
          {"spurious_fraction", m.spurious_fraction},
          {"sensor_height", m.sensor_height},
          {"occlusion", m.occlusion == Occlusion::Raycast ? "raycast" : "none"}};
}

std::pair<std::size_t, std::size_t> line_col(std::string_view text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace

SceneSpec parse_scene_spec(std::string_view text) {
  json j;
  try {
    j = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    const auto [line, col] = line_col(text, e.byte > 0 ? e.byte - 1 : 0);
    throw Error(ErrorCode::ConfigError,
                "scene config: syntax error at line " + std::to_string(line) + ", column " + std::to_string(col));
  }
  if (!j.is_object()) config_error("scene", "expected a JSON object");
  allow_keys(j, {"seed", "world", "objects", "agents", "observation"}, "");
  SceneSpec s;
  if (auto it = j.find("seed"); it != j.end()) {
    if (!it->is_number_unsigned()) config_error("seed", "expected a non-negative integer");
    s.seed = it->get<std::uint64_t>();
  }
  if (auto it = j.find("world"); it != j.end()) {
    if (!it->is_object()) config_error("world", "expected an object");
    allow_keys(*it, {"min", "max", "voxel_size"}, "world");
    s.world_min = vec3(field(*it, "min", "world"), "world.min");
    s.world_max = vec3(field(*it, "max", "world"), "world.max");
    if (auto v = it->find("voxel_size"); v != it->end()) s.voxel_size = number(*v, "world.voxel_size");
  }
  if (auto it = j.find("objects"); it != j.end()) {
    if (!it->is_array()) config_error("objects", "expected an array");
    for (std::size_t i = 0; i < it->size(); ++i) {
      const json& o = (*it)[i];
      const std::string path = "objects[" + std::to_string(i) + "]";
      if (!o.is_object()) config_error(path, "expected an object");
      allow_keys(o, {"kind", "center", "size", "yaw_deg", "class"}, path);
      SceneObject obj;
      const json& kind = field(o, "kind", path);
      if (!kind.is_string()) config_error(path + ".kind", "expected a string");
      try {
        obj.kind = object_kind_from_string(kind.get<std::string>());
      } catch (const Error& e) {
        config_error(path + ".kind", e.what());
      }
      obj.center = vec3(field(o, "center", path), path + ".center");
      obj.size = vec3(field(o, "size", path), path + ".size");
      if (auto y = o.find("yaw_deg"); y != o.end()) obj.yaw = number(*y, path + ".yaw_deg") * kDeg;
      obj.cls = class_id(field(o, "class", path), path + ".class");
      s.objects.push_back(obj);
    }
  }
  const json& agents = field(j, "agents", "scene");
  if (!agents.is_array()) config_error("agents", "expected an array");
  for (std::size_t i = 0; i < agents.size(); ++i) {
    const json& a = agents[i];
    const std::string path = "agents[" + std::to_string(i) + "]";
    if (!a.is_object()) config_error(path, "expected an object");
    allow_keys(a, {"id", "position", "yaw_deg"}, path);
    AgentPose p;
    p.id = static_cast<std::uint32_t>(i);
    optional_number(a, "id", p.id, path);
    const Vec3 pos = vec3(field(a, "position", path), path + ".position");
    double yaw = 0.0;
    if (auto y = a.find("yaw_deg"); y != a.end()) yaw = number(*y, path + ".yaw_deg") * kDeg;
    p.pose = RigidTransform::from_yaw(yaw, pos);
    s.agents.push_back(p);
  }
  if (auto it = j.find("observation"); it != j.end()) s.observation = parse_observation(*it, "observation");
  try {
    s.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::ConfigError, std::string("scene config: ") + e.what());
  }
  return s;
}

ObservationModel parse_observation_model(std::string_view text, const ObservationModel& base) {
  json j;
  try {
    j = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    const auto [line, col] = line_col(text, e.byte > 0 ? e.byte - 1 : 0);
    throw Error(ErrorCode::ConfigError,
                "observation: syntax error at line " + std::to_string(line) + ", column " + std::to_string(col));
  }
  ObservationModel m = parse_observation(j, "observation", base);
  try {
    m.validate();
  } catch (const Error& e) {
    config_error("observation", e.what());
  }
  return m;
}

std::string observation_model_to_json(const ObservationModel& m) { return observation_json(m).dump(); }

std::string scene_spec_to_json(const SceneSpec& s) {
  json j;
  j["seed"] = s.seed;
  j["world"] = {{"min", s.world_min}, {"max", s.world_max}, {"voxel_size", s.voxel_size}};
  j["objects"] = json::array();
  for (const auto& o : s.objects) {
    j["objects"].push_back({{"kind", to_string(o.kind)},
                            {"center", o.center},
                            {"size", o.size},
                            {"yaw_deg", o.yaw / kDeg},
                            {"class", class_names()[o.cls]}});
  }
  j["agents"] = json::array();
  for (const auto& a : s.agents) {
    const Quat& q = a.pose.rotation;
    const double yaw = 2.0 * std::atan2(q.z, q.w);
    j["agents"].push_back({{"id", a.id}, {"position", a.pose.translation}, {"yaw_deg", yaw / kDeg}});
  }
  j["observation"] = observation_json(s.observation);
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Generator

namespace {

constexpr double kVoxel = 0.4;

double voxels(std::uint64_t n) { return static_cast<double>(n) * kVoxel; }

// Moves a box center so that its faces land on voxel boundaries.
double snap_center(double center, double size) {
  const double lo = std::round((center - 0.5 * size) / kVoxel) * kVoxel;
  return lo + 0.5 * size;
}

SceneObject box(ObjectKind kind, std::uint8_t c, double cx, double cy, double sx, double sy, double sz,
                double z0 = 0.0) {
  SceneObject o;
  o.kind = kind;
  o.cls = c;
  o.size = {sx, sy, sz};
  o.center = {snap_center(cx, sx), snap_center(cy, sy), z0 + 0.5 * sz};
  return o;
}

struct Footprint {
  double x0, x1, y0, y1;
  bool overlaps(const Footprint& o, double margin) const {
    return x0 < o.x1 + margin && o.x0 < x1 + margin && y0 < o.y1 + margin && o.y0 < y1 + margin;
  }
};

Footprint footprint(const SceneObject& o) {
  const Vec3 h = aabb_half(o);
  return {o.center[0] - h[0], o.center[0] + h[0], o.center[1] - h[1], o.center[1] + h[1]};
}

}  // namespace

SceneSpec generate_scene(std::uint64_t seed, const GeneratorConfig& cfg) {
  if (cfg.num_agents < 1 || cfg.num_agents > 7) throw InvalidArgument("generator: num_agents must be 1..7");
  if (!near_multiple(cfg.half_extent, kVoxel) || cfg.half_extent < 24.0) {
    throw InvalidArgument("generator: half_extent must be whole voxels and >= 24 m");
  }
  Rng rng(derive_seed(seed, "scene"));
  const double H = cfg.half_extent;
  SceneSpec s;
  s.seed = seed;
  s.world_min = {-H, -H, -1.6};
  s.world_max = {H, H, 1.6};
  auto& obj = s.objects;

  const double road_w = voxels(16 + 2 * rng.below(3));  // 6.4 .. 8.0 m
  const double walk_w = 2.4;
  const bool cross = rng.bernoulli(0.5);
  const double cross_x = cross ? voxels(rng.below(41)) - 8.0 : 0.0;

  // Ground: terrain, then sidewalks, then roads on top.
  obj.push_back(box(ObjectKind::Ground, cls::kTerrain, 0.0, 0.0, 2 * H, 2 * H, 0.4, -0.4));
  for (double side : {-1.0, 1.0}) {
    obj.push_back(box(ObjectKind::Sidewalk, cls::kSidewalk, 0.0, side * (0.5 * road_w + 0.5 * walk_w), 2 * H, walk_w, 0.4, -0.4));
    if (cross) {
      obj.push_back(box(ObjectKind::Sidewalk, cls::kSidewalk, cross_x + side * (0.5 * road_w + 0.5 * walk_w), 0.0, walk_w,
                        2 * H, 0.4, -0.4));
    }
  }
  obj.push_back(box(ObjectKind::Ground, cls::kRoad, 0.0, 0.0, 2 * H, road_w, 0.4, -0.4));
  if (cross) obj.push_back(box(ObjectKind::Ground, cls::kRoad, cross_x, 0.0, road_w, 2 * H, 0.4, -0.4));

  const double street_edge = 0.5 * road_w + walk_w;  // distance from the road axis to the building line
  auto in_cross = [&](double x0, double x1) {
    return cross && x1 > cross_x - street_edge - 0.4 && x0 < cross_x + street_edge + 0.4;
  };

  // Roadside structures along both sides of the x road.
  for (double side : {-1.0, 1.0}) {
    double x = -H + voxels(rng.below(10));
    while (x < H - 2.0) {
      double len = voxels(10 + rng.below(31));
      len = std::min(len, H - x);
      const double depth = voxels(15 + rng.below(16));
      const double setback = voxels(rng.below(3));
      const double near = street_edge + setback;
      const double far = std::min(H, near + depth);
      if (!in_cross(x, x + len) && far - near >= 0.8) {
        const double cy = side * 0.5 * (near + far);
        const double u = rng.uniform();
        if (u < 0.6) {
          obj.push_back(box(ObjectKind::Building, cls::kBuilding, x + 0.5 * len, cy, len, far - near, 1.6));
        } else if (u < 0.75) {
          obj.push_back(box(ObjectKind::Building, cls::kVegetation, x + 0.5 * len, cy, len, far - near,
                            voxels(3 + rng.below(2))));
        } else if (u < 0.9) {
          obj.push_back(box(ObjectKind::Wall, cls::kWall, x + 0.5 * len, side * (near + 0.2), len, 0.4,
                            voxels(3 + rng.below(2))));
        } else {
          obj.push_back(box(ObjectKind::Wall, cls::kFence, x + 0.5 * len, side * (near + 0.2), len, 0.4,
                            voxels(2 + rng.below(2))));
        }
      }
      x += len + voxels(2 + rng.below(14));
    }
  }

  // Street furniture on the sidewalks.
  for (double side : {-1.0, 1.0}) {
    const double py = side * (0.5 * road_w + 0.6);
    for (double x = -H + 2.0 + voxels(rng.below(10)); x < H - 2.0; x += 8.0 + voxels(rng.below(16))) {
      if (in_cross(x - 0.4, x + 0.4)) continue;
      obj.push_back(box(ObjectKind::Pole, cls::kPole, x, py, 0.4, 0.4, 1.6));
      if (rng.bernoulli(0.5)) obj.push_back(box(ObjectKind::Sign, cls::kTrafficSign, x, py - side * 0.4, 0.4, 1.2, 0.4, 1.2));
    }
    const std::uint64_t walkers = 2 + rng.below(4);
    for (std::uint64_t k = 0; k < walkers; ++k) {
      const double x = rng.uniform(-H + 2.0, H - 2.0);
      if (in_cross(x - 0.4, x + 0.4)) continue;
      obj.push_back(box(ObjectKind::Pole, cls::kPedestrian, x, side * (0.5 * road_w + 1.4), 0.4, 0.4, 1.6));
    }
    const std::uint64_t bins = 1 + rng.below(3);
    for (std::uint64_t k = 0; k < bins; ++k) {
      const double x = rng.uniform(-H + 2.0, H - 2.0);
      if (in_cross(x - 0.8, x + 0.8)) continue;
      obj.push_back(box(ObjectKind::Building, cls::kOther, x, side * (0.5 * road_w + 1.6), 0.8, 0.8, 0.8));
    }
  }

  // Agents drive in lanes near the origin; on a cross road some turn onto it.
  const double lane = std::round(0.25 * road_w / kVoxel) * kVoxel;
  std::vector<Footprint> cars;
  std::vector<SceneObject> agent_cars;
  // Larger fleets spread wider and pack closer so up to 7 agents fit near the origin.
  const bool crowded = cfg.num_agents > 3;
  const std::uint64_t x_slots = crowded ? 101 : 81;
  const double x_shift = crowded ? 20.0 : 16.0;
  const double gap = crowded ? 0.4 : 4.0;
  for (std::size_t a = 0; a < cfg.num_agents; ++a) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const bool on_cross = cross && a > 0 && rng.bernoulli(0.3);
      const double dir = rng.bernoulli(0.5) ? 1.0 : -1.0;
      double x, y, yaw;
      if (on_cross) {
        x = cross_x + dir * lane;
        y = voxels(rng.below(61)) - 12.0;
        yaw = dir > 0 ? 0.5 * std::numbers::pi : -0.5 * std::numbers::pi;
      } else {
        x = a == 0 ? 0.0 : voxels(rng.below(x_slots)) - x_shift;
        y = -dir * lane;
        yaw = dir > 0 ? 0.0 : std::numbers::pi;
      }
      SceneObject car;
      car.kind = ObjectKind::Vehicle;
      car.cls = cls::kVehicle;
      car.size = {4.0, 2.4, 1.2};
      car.center = {x, y, 0.6};
      car.yaw = yaw;
      const Footprint fp = footprint(car);
      if (std::any_of(cars.begin(), cars.end(), [&](const Footprint& o) { return fp.overlaps(o, gap); })) continue;
      cars.push_back(fp);
      agent_cars.push_back(car);
      s.agents.push_back({static_cast<std::uint32_t>(a), RigidTransform::from_yaw(yaw, {x, y, 0.0})});
      break;
    }
    if (s.agents.size() != a + 1) throw InvalidArgument("generator: could not place all agents");
  }

  // Other traffic and parked vehicles.
  const std::uint64_t traffic = 4 + rng.below(7);
  for (std::uint64_t k = 0; k < traffic; ++k) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const bool truck = rng.bernoulli(0.2);
      const double len = truck ? 8.0 : 4.4;
      const double wid = truck ? 2.4 : 2.0;
      const double height = truck || rng.bernoulli(0.3) ? 1.6 : 1.2;
      const double side = rng.bernoulli(0.5) ? 1.0 : -1.0;
      const bool parked = rng.bernoulli(0.4);
      const double y = parked ? side * (0.5 * road_w - 0.5 * wid - 0.2) : side * lane;
      const double x = rng.uniform(-H + 0.5 * len + 0.4, H - 0.5 * len - 0.4);
      SceneObject car = box(ObjectKind::Vehicle, cls::kVehicle, x, y, len, wid, height);
      const Footprint fp = footprint(car);
      if (in_cross(fp.x0, fp.x1)) continue;
      if (std::any_of(cars.begin(), cars.end(), [&](const Footprint& o) { return fp.overlaps(o, 0.8); })) continue;
      cars.push_back(fp);
      obj.push_back(car);
      break;
    }
  }
  obj.insert(obj.end(), agent_cars.begin(), agent_cars.end());
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Scene and visibility

namespace {

GridGeometry world_geometry(const SceneSpec& s) {
  GridGeometry g;
  g.origin = s.world_min;
  g.voxel_size = s.voxel_size;
  for (int a = 0; a < 3; ++a) {
    g.dims[a] = static_cast<std::uint32_t>(std::llround((s.world_max[a] - s.world_min[a]) / s.voxel_size));
  }
  return g;
}

// Voxel containing p, or nullopt when outside the grid.
std::optional<std::array<std::int64_t, 3>> voxel_of(const GridGeometry& g, const Vec3& p) {
  std::array<std::int64_t, 3> v{};
  for (int a = 0; a < 3; ++a) {
    v[a] = static_cast<std::int64_t>(std::floor((p[a] - g.origin[a]) / g.voxel_size));
    if (v[a] < 0 || v[a] >= static_cast<std::int64_t>(g.dims[a])) return std::nullopt;
  }
  return v;
}

bool occupied(const LabelGrid& w, std::int64_t x, std::int64_t y, std::int64_t z) {
  const auto& d = w.geometry.dims;
  if (x < 0 || y < 0 || z < 0 || x >= d[0] || y >= d[1] || z >= d[2]) return false;
  return w.labels[w.geometry.index(static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y),
                                   static_cast<std::uint32_t>(z))] != kEmptyClass;
}

constexpr std::array<std::array<int, 3>, 6> kFaceNormal{{{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}}};

}  // namespace

Scene::Scene(SceneSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  world_ = LabelGrid(world_geometry(spec_));
  const GridGeometry& g = world_.geometry;
  for (const SceneObject& o : spec_.objects) {
    const Vec3 h = aabb_half(o);
    std::array<std::int64_t, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor((o.center[a] - h[a] - g.origin[a]) / g.voxel_size)));
      hi[a] = std::min<std::int64_t>(g.dims[a] - 1, static_cast<std::int64_t>(std::floor((o.center[a] + h[a] - g.origin[a]) / g.voxel_size)));
    }
    for (std::int64_t x = lo[0]; x <= hi[0]; ++x)
      for (std::int64_t y = lo[1]; y <= hi[1]; ++y)
        for (std::int64_t z = lo[2]; z <= hi[2]; ++z) {
          const auto ux = static_cast<std::uint32_t>(x), uy = static_cast<std::uint32_t>(y), uz = static_cast<std::uint32_t>(z);
          if (o.contains(g.voxel_center(ux, uy, uz))) world_.labels[g.index(ux, uy, uz)] = o.cls;
        }
  }
}

Vec3 Scene::sensor_position(std::size_t agent) const {
  return spec_.agents.at(agent).pose.apply({0.0, 0.0, spec_.observation.sensor_height});
}

bool segment_clear(const LabelGrid& world, const Vec3& from, const Vec3& to) {
  const GridGeometry& g = world.geometry;
  Vec3 a{}, d{};
  std::array<std::int64_t, 3> v{}, end{}, step{};
  std::array<double, 3> t_max{}, t_delta{};
  for (int k = 0; k < 3; ++k) {
    a[k] = (from[k] - g.origin[k]) / g.voxel_size;
    const double b = (to[k] - g.origin[k]) / g.voxel_size;
    d[k] = b - a[k];
    v[k] = static_cast<std::int64_t>(std::floor(a[k]));
    end[k] = static_cast<std::int64_t>(std::floor(b));
    if (d[k] > 0) {
      step[k] = 1;
      t_max[k] = (static_cast<double>(v[k] + 1) - a[k]) / d[k];
      t_delta[k] = 1.0 / d[k];
    } else if (d[k] < 0) {
      step[k] = -1;
      t_max[k] = (static_cast<double>(v[k]) - a[k]) / d[k];
      t_delta[k] = -1.0 / d[k];
    } else {
      step[k] = 0;
      t_max[k] = std::numeric_limits<double>::infinity();
      t_delta[k] = std::numeric_limits<double>::infinity();
    }
  }
  const std::int64_t max_steps = std::abs(end[0] - v[0]) + std::abs(end[1] - v[1]) + std::abs(end[2] - v[2]) + 1;
  for (std::int64_t i = 0; i <= max_steps; ++i) {
    if (occupied(world, v[0], v[1], v[2])) return false;
    if (v == end) return true;
    int axis = 0;
    if (t_max[1] < t_max[axis]) axis = 1;
    if (t_max[2] < t_max[axis]) axis = 2;
    if (t_max[axis] > 1.0) return true;
    v[axis] += step[axis];
    t_max[axis] += t_delta[axis];
  }
  return true;
}

std::vector<VoxelFace> visible_faces(const Scene& scene, std::size_t agent, Occlusion occlusion) {
  const LabelGrid& w = scene.world();
  const GridGeometry& g = w.geometry;
  const RigidTransform to_agent = scene.agent(agent).pose.inverse();
  const Vec3 sensor = scene.sensor_position(agent);
  const Roi roi;
  std::vector<VoxelFace> out;
  for (std::uint32_t x = 0; x < g.dims[0]; ++x)
    for (std::uint32_t y = 0; y < g.dims[1]; ++y)
      for (std::uint32_t z = 0; z < g.dims[2]; ++z) {
        const std::size_t idx = g.index(x, y, z);
        if (w.labels[idx] == kEmptyClass) continue;
        const Vec3 c = g.voxel_center(x, y, z);
        if (!roi.contains(to_agent.apply(c))) continue;
        for (std::uint8_t f = 0; f < 6; ++f) {
          const auto& n = kFaceNormal[f];
          if (occupied(w, std::int64_t{x} + n[0], std::int64_t{y} + n[1], std::int64_t{z} + n[2])) continue;
          if (occlusion == Occlusion::Raycast) {
            const Vec3 nv{static_cast<double>(n[0]), static_cast<double>(n[1]), static_cast<double>(n[2])};
            const Vec3 face = c + (0.5 * g.voxel_size) * nv;
            if (dot(sensor - face, nv) <= 0.0) continue;
            if (!segment_clear(w, sensor, face + (0.01 * g.voxel_size) * nv)) continue;
          }
          out.push_back({idx, f});
        }
      }
  return out;
}

std::vector<std::uint8_t> visible_voxels(const Scene& scene, std::size_t agent, Occlusion occlusion) {
  std::vector<std::uint8_t> seen(scene.world().labels.size(), 0);
  for (const VoxelFace& f : visible_faces(scene, agent, occlusion)) seen[f.voxel] = 1;
  return seen;
}

namespace {

LabelGrid resample_to_agent(const Scene& scene, std::size_t agent, const std::vector<std::uint8_t>& seen) {
  const LabelGrid& w = scene.world();
  LabelGrid out(GridGeometry::ego_default());
  const GridGeometry& g = out.geometry;
  const RigidTransform& pose = scene.agent(agent).pose;
  for (std::size_t v = 0; v < g.num_voxels(); ++v) {
    const auto wv = voxel_of(w.geometry, pose.apply(g.voxel_center(v)));
    if (!wv) continue;
    const std::size_t wi = w.geometry.index(static_cast<std::uint32_t>((*wv)[0]), static_cast<std::uint32_t>((*wv)[1]),
                                            static_cast<std::uint32_t>((*wv)[2]));
    if (seen[wi]) out.labels[v] = w.labels[wi];
  }
  return out;
}

}  // namespace

GroundTruth build_ground_truth(const Scene& scene, Occlusion occlusion) {
  GroundTruth gt;
  std::vector<std::uint8_t> any(scene.world().labels.size(), 0);
  std::vector<std::vector<std::uint8_t>> seen;
  for (std::size_t a = 0; a < scene.num_agents(); ++a) {
    seen.push_back(visible_voxels(scene, a, occlusion));
    for (std::size_t i = 0; i < any.size(); ++i) any[i] |= seen.back()[i];
  }
  for (std::size_t a = 0; a < scene.num_agents(); ++a) {
    gt.per_agent.push_back(resample_to_agent(scene, a, seen[a]));
    gt.collaborative.push_back(resample_to_agent(scene, a, any));
  }
  return gt;
}

// ---------------------------------------------------------------------------
// Observation

namespace {

double in_plane_scale(std::uint8_t c) {
  switch (c) {
    case cls::kPole:
    case cls::kTrafficSign:
    case cls::kPedestrian:
      return 0.12;
    default:
      return 0.18;
  }
}

constexpr double kNormalScale = 0.08;

// Rotation taking the local +z axis onto the face normal.
Quat face_alignment(std::uint8_t face) {
  const double h = std::numbers::pi / 2;
  switch (face) {
    case 0: return quat_from_axis_angle({0, 1, 0}, -h);
    case 1: return quat_from_axis_angle({0, 1, 0}, h);
    case 2: return quat_from_axis_angle({1, 0, 0}, h);
    case 3: return quat_from_axis_angle({1, 0, 0}, -h);
    case 4: return quat_from_axis_angle({1, 0, 0}, std::numbers::pi);
    default: return Quat::identity();
  }
}

}  // namespace

std::vector<SemanticGaussian> observe_world(const Scene& scene, std::size_t agent, const ObservationModel& model) {
  model.validate();
  const auto faces = visible_faces(scene, agent, model.occlusion);
  std::vector<SemanticGaussian> out;
  if (faces.empty()) return out;
  const LabelGrid& w = scene.world();
  const GridGeometry& g = w.geometry;
  const Vec3 sensor = scene.agent(agent).pose.apply({0.0, 0.0, model.sensor_height});
  Rng rng(derive_seed(scene.spec().seed, "observe", scene.agent(agent).id));
  const std::size_t total = model.gaussians_per_agent;
  const auto spurious = static_cast<std::size_t>(std::llround(static_cast<double>(total) * model.spurious_fraction));
  out.reserve(total);
  for (std::size_t k = 0; k < total; ++k) {
    const bool fake = k >= total - spurious;
    const VoxelFace& f = faces[rng.below(faces.size())];
    const int axis = f.face / 2;
    const Vec3 c = g.voxel_center(f.voxel);
    Vec3 nv{};
    nv[axis] = (f.face % 2) ? 1.0 : -1.0;
    Vec3 p = c;
    for (int t = 0; t < 3; ++t)
      if (t != axis) p[t] += g.voxel_size * rng.uniform(-0.5, 0.5);
    if (fake) p = p + (g.voxel_size * rng.uniform(0.75, 1.75)) * nv;
    for (double& v : p) v += model.position_noise * rng.normal();

    std::uint8_t label = w.labels[f.voxel];
    if (fake) {
      label = static_cast<std::uint8_t>(rng.below(kEmptyClass));
    } else if (rng.bernoulli(model.label_flip)) {
      label = static_cast<std::uint8_t>((label + 1 + rng.below(kEmptyClass - 1)) % kEmptyClass);
    }

    SemanticGaussian gs;
    gs.mean = p;
    const double base = fake ? 0.15 : in_plane_scale(label);
    for (int t = 0; t < 3; ++t) {
      const double s0 = (!fake && t == 2) ? kNormalScale : base;
      gs.scale[t] = std::clamp(s0 * std::exp(model.scale_jitter * rng.normal()), 0.02, 1.0);
    }
    gs.rotation = canonicalize_quaternion(
        quat_multiply(face_alignment(f.face), quat_from_axis_angle({0, 0, 1}, rng.uniform(0.0, 2.0 * std::numbers::pi))));
    const Vec3 r = p - sensor;
    const double range = std::sqrt(dot(r, r));
    gs.opacity = std::clamp(model.opacity_near * std::exp(-range / model.opacity_falloff) * (fake ? 0.6 : 1.0), 0.05, 1.0);
    for (std::size_t cl = 0; cl < kEmptyClass; ++cl) gs.semantics[cl] = model.semantic_floor;
    gs.semantics[label] = model.semantic_strength * rng.uniform(0.8, 1.2);
    out.push_back(gs);
  }
  return out;
}

std::vector<SemanticGaussian> observe(const Scene& scene, std::size_t agent, const ObservationModel& model) {
  const RigidTransform to_agent = scene.agent(agent).pose.inverse();
  std::vector<SemanticGaussian> out = observe_world(scene, agent, model);
  for (auto& g : out) g = transform_gaussian(g, to_agent);
  return out;
}

SemanticGaussian empty_space_gaussian(const Roi& roi) {
  SemanticGaussian g;
  g.mean = roi.center;
  g.scale = {20.0, 20.0, 20.0};
  g.rotation = Quat::identity();
  g.opacity = 1.0;
  g.semantics = {};
  g.semantics[kEmptyClass] = 1.0;
  return g;
}

// ---------------------------------------------------------------------------
// Episodes

EpisodeInputs prepare_episode(const Scene& scene, const ObservationModel& model, const EpisodeConfig& cfg) {
  cfg.fusion.validate();
  cfg.splat.validate();
  const std::size_t n = scene.num_agents();
  EpisodeInputs in;
  for (std::size_t a = 0; a < n; ++a) {
    in.agent_ids.push_back(scene.agent(a).id);
    in.own.push_back(observe(scene, a, model));
  }
  in.ground_truth = build_ground_truth(scene, model.occlusion).collaborative;
  in.received.resize(n);

  std::vector<std::size_t> by_id(n);
  for (std::size_t a = 0; a < n; ++a) by_id[a] = a;
  std::sort(by_id.begin(), by_id.end(), [&](std::size_t a, std::size_t b) { return in.agent_ids[a] < in.agent_ids[b]; });

  const Roi roi;
  for (std::size_t i = 0; i < n; ++i) {
    const RigidTransform to_i = scene.agent(i).pose.inverse();
    for (std::size_t j : by_id) {
      if (j == i) continue;
      GaussianMessage msg;
      msg.sender_id = in.agent_ids[j];
      msg.receiver_id = in.agent_ids[i];
      msg.frame_tag = cfg.frame_tag;
      msg.precision = cfg.precision;
      msg.gaussians = cull_to_roi(in.own[j], to_i * scene.agent(j).pose, roi);
      SentMessage sent{msg.sender_id, msg.receiver_id, enforce_budget(msg, cfg.budget_bytes), {}};
      if (sent.accepted) {
        sent.bytes = serialize_message(msg);
        const GaussianMessage decoded = deserialize_message(sent.bytes);
        in.stats.record(msg);
        in.received[i].insert(in.received[i].end(), decoded.gaussians.begin(), decoded.gaussians.end());
      } else {
        in.stats.record_rejected(msg);
      }
      if (cfg.keep_messages) in.messages.push_back(std::move(sent));
    }
  }
  if (cfg.empty_gaussian) in.extras.push_back(empty_space_gaussian(roi));
  return in;
}

std::vector<TrainSample> training_samples(const EpisodeInputs& in) {
  std::vector<TrainSample> out;
  for (std::size_t a = 0; a < in.own.size(); ++a) {
    out.push_back({in.own[a], in.received[a], in.extras, in.ground_truth[a]});
  }
  return out;
}

EpisodeResult run_mode(const EpisodeInputs& in, Mode mode, const EpisodeConfig& cfg, const ModeParams& params) {
  if (mode == Mode::Learned && params.fusion == nullptr) throw InvalidArgument("learned mode requires fusion params");
  if (mode == Mode::Naive && params.calibration == nullptr) throw InvalidArgument("naive mode requires calibration params");
  EpisodeResult r;
  r.mode = mode;
  if (mode != Mode::Single) r.stats = in.stats;
  const CategoryMap map = CategoryMap::standard();
  for (std::size_t a = 0; a < in.own.size(); ++a) {
    std::vector<SemanticGaussian> render;
    switch (mode) {
      case Mode::Single:
        render = in.own[a];
        render.insert(render.end(), in.extras.begin(), in.extras.end());
        break;
      case Mode::ZeroShot: {
        const std::vector<SemanticGaussian>* recv = &in.received[a];
        render = stack(in.own[a], std::span(recv, 1));
        render.insert(render.end(), in.extras.begin(), in.extras.end());
        break;
      }
      case Mode::Naive:
        render = naive_render_set({in.own[a], in.received[a], in.extras, in.ground_truth[a]}, *params.calibration);
        break;
      case Mode::Learned:
        render = learned_render_set({in.own[a], in.received[a], in.extras, in.ground_truth[a]}, cfg.fusion, *params.fusion);
        break;
    }
    ChannelGrid ch = splat(render, in.ground_truth[a].geometry, cfg.splat);
    LabelGrid pred = labels_from_channels(ch, cfg.splat.min_contribution);
    r.counts += count_3d(pred, in.ground_truth[a]);
    r.counts += count_bev(pred, in.ground_truth[a], map);
    r.channels.push_back(std::move(ch));
    r.predictions.push_back(std::move(pred));
  }
  return r;
}

EpisodeResult run_episode(const Scene& scene, const ObservationModel& model, Mode mode, const EpisodeConfig& cfg,
                          const ModeParams& params) {
  return run_mode(prepare_episode(scene, model, cfg), mode, cfg, params);
}

}  // namespace gscollab
