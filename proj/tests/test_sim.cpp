#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "doctest.h"
#include "gscollab/kernels/kernels.hpp"
#include "gscollab/sim.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace gscollab;
using namespace testutil;

namespace {

SceneObject box(ObjectKind kind, std::uint8_t c, Vec3 center, Vec3 size) {
  SceneObject o;
  o.kind = kind;
  o.cls = c;
  o.center = center;
  o.size = size;
  return o;
}

AgentPose agent_at(std::uint32_t id, Vec3 t, double yaw = 0.0) { return {id, RigidTransform::from_yaw(yaw, t)}; }

SceneSpec small_spec() {
  SceneSpec s;
  s.seed = 5;
  s.world_min = {-24, -24, -1.6};
  s.world_max = {24, 24, 1.6};
  s.agents = {agent_at(0, {0, 0, 0})};
  return s;
}

ObservationModel noiseless(std::size_t p = 3000) {
  ObservationModel m;
  m.gaussians_per_agent = p;
  m.position_noise = 0;
  m.scale_jitter = 0;
  m.label_flip = 0;
  m.spurious_fraction = 0;
  return m;
}

std::size_t count_labeled(const LabelGrid& l) {
  return static_cast<std::size_t>(std::count_if(l.labels.begin(), l.labels.end(), [](auto v) { return v != kEmptyClass; }));
}

bool inside(const SceneObject& o, const Vec3& p, double pad) {
  for (int a = 0; a < 3; ++a)
    if (std::abs(p[a] - o.center[a]) > 0.5 * o.size[a] + pad) return false;
  return true;
}

std::size_t faces_with(const std::vector<VoxelFace>& faces, std::uint8_t face) {
  return static_cast<std::size_t>(std::count_if(faces.begin(), faces.end(), [&](const VoxelFace& f) { return f.face == face; }));
}

std::uint64_t grids_hash(const std::vector<LabelGrid>& grids) {
  std::vector<std::uint8_t> all;
  for (const auto& g : grids) {
    const auto b = encode_voxg(g);
    all.insert(all.end(), b.begin(), b.end());
  }
  return oracle::fnv1a(all);
}

}  // namespace

TEST_SUITE("sim") {

TEST_CASE("rasterized boxes cover whole voxels") {
  SceneSpec s = small_spec();
  Scene empty(s);
  CHECK(count_labeled(empty.world()) == 0);
  CHECK(empty.world().geometry.dims == std::array<std::uint32_t, 3>{120, 120, 8});
  const GroundTruth gt0 = build_ground_truth(empty);
  CHECK(count_labeled(gt0.collaborative[0]) == 0);

  for (double edge : {0.4, 0.8, 1.2, 2.0}) {
    s.objects = {box(ObjectKind::Vehicle, cls::kVehicle, {4.0 + 0.5 * edge, 2.0 + 0.5 * edge, -1.6 + 0.5 * edge}, {edge, edge, edge})};
    const auto n = static_cast<std::size_t>(std::llround(edge / 0.4));
    CHECK(count_labeled(Scene(s).world()) == n * n * n);
  }
  s.objects = {box(ObjectKind::Building, cls::kBuilding, {0.6, -2.2, 0.0}, {2.0, 1.2, 3.2})};
  CHECK(count_labeled(Scene(s).world()) == 5 * 3 * 8);

  // Later objects overwrite earlier ones.
  s.objects.push_back(box(ObjectKind::Vehicle, cls::kVehicle, {0.6, -2.2, 0.0}, {0.4, 0.4, 0.4}));
  const Scene both(s);
  CHECK(count_labeled(both.world()) == 5 * 3 * 8);
  std::size_t veh = 0;
  for (auto v : both.world().labels) veh += v == cls::kVehicle;
  CHECK(veh == 2);
}

TEST_CASE("scene spec validation") {
  SceneSpec s = small_spec();
  auto expect_spec_error = [](const SceneSpec& bad) {
    try {
      bad.validate();
      FAIL("invalid spec accepted");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::SpecError);
    }
  };
  SceneSpec bad = s;
  bad.objects = {box(ObjectKind::Building, cls::kBuilding, {23.5, 0, 0}, {2, 2, 2})};
  expect_spec_error(bad);
  bad = s;
  bad.objects = {box(ObjectKind::Building, kEmptyClass, {0, 0, 0}, {2, 2, 2})};
  expect_spec_error(bad);
  bad = s;
  bad.agents.clear();
  expect_spec_error(bad);
  bad = s;
  for (std::uint32_t i = 1; i < 8; ++i) bad.agents.push_back(agent_at(i, {static_cast<double>(i), 0, 0}));
  expect_spec_error(bad);
  bad.agents.pop_back();
  CHECK_NOTHROW(bad.validate());
  bad = s;
  bad.agents.push_back(agent_at(0, {4, 0, 0}));
  expect_spec_error(bad);
  bad = s;
  bad.world_max[0] = 24.1;
  expect_spec_error(bad);
  bad = s;
  bad.observation.label_flip = 1.5;
  expect_spec_error(bad);
  CHECK_THROWS_AS(Scene{bad}, Error);
}

TEST_CASE("segment traversal") {
  SceneSpec s = small_spec();
  s.objects = {box(ObjectKind::Wall, cls::kWall, {2.2, 0, 0}, {0.4, 4.0, 3.2})};
  const Scene sc(s);
  CHECK_FALSE(segment_clear(sc.world(), {0, 0, 0}, {5, 0, 0}));
  CHECK_FALSE(segment_clear(sc.world(), {5, 1, 1}, {0, -1, -1}));
  CHECK(segment_clear(sc.world(), {0, 0, 0}, {1.9, 0.3, 0.2}));
  CHECK(segment_clear(sc.world(), {0, 3, 0}, {5, 3, 0}));
  CHECK(segment_clear(sc.world(), {3, 0, 0}, {3, 0, 0}));
  // Segments that graze past the wall end.
  CHECK(segment_clear(sc.world(), {0, 2.1, 0}, {5, 2.1, 0}));
  CHECK_FALSE(segment_clear(sc.world(), {0, 1.9, 0}, {5, 1.9, 0}));
}

TEST_CASE("an object behind a wall yields no Gaussians under raycasting") {
  SceneSpec s = small_spec();
  const SceneObject wall = box(ObjectKind::Wall, cls::kWall, {5.0, 0, 0}, {0.4, 12.0, 3.2});
  const SceneObject car = box(ObjectKind::Vehicle, cls::kVehicle, {8.0, 0, -0.8}, {3.2, 1.6, 1.6});
  s.objects = {wall, car};
  const Scene sc(s);
  ObservationModel m = noiseless();
  const auto seen = observe_world(sc, 0, m);
  REQUIRE(seen.size() == m.gaussians_per_agent);
  for (const auto& g : seen) CHECK_FALSE(inside(car, g.mean, 1e-9));
  const auto vis = visible_voxels(sc, 0, Occlusion::Raycast);
  for (std::size_t v = 0; v < vis.size(); ++v)
    if (vis[v]) CHECK(sc.world().labels[v] == cls::kWall);

  m.occlusion = Occlusion::None;
  const auto all = observe_world(sc, 0, m);
  CHECK(std::count_if(all.begin(), all.end(), [&](const SemanticGaussian& g) { return inside(car, g.mean, 1e-9); }) > 0);
}

TEST_CASE("agents on both sides of a wall cover both faces") {
  SceneSpec s = small_spec();
  s.objects = {box(ObjectKind::Wall, cls::kWall, {0.2, 0, 0}, {0.4, 8.0, 3.2})};
  s.agents = {agent_at(0, {-6, 0, 0}), agent_at(1, {6.4, 0, 0}, std::numbers::pi)};
  const Scene sc(s);
  // 20 voxels along y and 8 in z on each broad face.
  const std::size_t per_side = 20 * 8;
  const auto a = visible_faces(sc, 0, Occlusion::Raycast);
  const auto b = visible_faces(sc, 1, Occlusion::Raycast);
  CHECK(faces_with(a, 0) == per_side);
  CHECK(faces_with(a, 1) == 0);
  CHECK(faces_with(b, 1) == per_side);
  CHECK(faces_with(b, 0) == 0);
  std::vector<VoxelFace> uni = a;
  uni.insert(uni.end(), b.begin(), b.end());
  CHECK(faces_with(uni, 0) + faces_with(uni, 1) == 2 * per_side);
}

TEST_CASE("noiseless Gaussians sit in exposed voxels of their class") {
  const Scene sc(generate_scene(42));
  const LabelGrid& w = sc.world();
  const GridGeometry& g = w.geometry;
  auto voxel_at = [&](const Vec3& p) {
    std::array<std::int64_t, 3> v{};
    for (int a = 0; a < 3; ++a) v[a] = static_cast<std::int64_t>(std::floor((p[a] - g.origin[a]) / g.voxel_size));
    return v;
  };
  auto label = [&](std::int64_t x, std::int64_t y, std::int64_t z) -> int {
    if (x < 0 || y < 0 || z < 0 || x >= g.dims[0] || y >= g.dims[1] || z >= g.dims[2]) return kEmptyClass;
    return w.labels[g.index(static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y), static_cast<std::uint32_t>(z))];
  };
  for (Occlusion occ : {Occlusion::None, Occlusion::Raycast}) {
    ObservationModel m = noiseless(2000);
    m.occlusion = occ;
    for (const auto& gs : observe_world(sc, 1, m)) {
      CHECK(is_valid(gs));
      const auto c = static_cast<int>(std::max_element(gs.semantics.begin(), gs.semantics.end()) - gs.semantics.begin());
      const auto v = voxel_at(gs.mean);
      CHECK(label(v[0], v[1], v[2]) == c);
      const bool exposed = label(v[0] - 1, v[1], v[2]) == kEmptyClass || label(v[0] + 1, v[1], v[2]) == kEmptyClass ||
                           label(v[0], v[1] - 1, v[2]) == kEmptyClass || label(v[0], v[1] + 1, v[2]) == kEmptyClass ||
                           label(v[0], v[1], v[2] - 1) == kEmptyClass || label(v[0], v[1], v[2] + 1) == kEmptyClass;
      CHECK(exposed);
    }
  }
}

TEST_CASE("observations are deterministic and frame consistent") {
  const Scene sc(generate_scene(11));
  ObservationModel m;
  m.gaussians_per_agent = 3000;
  const auto a = observe(sc, 0, m);
  CHECK(observe(sc, 0, m) == a);
  CHECK(observe(sc, 1, m) != a);
  const auto w = observe_world(sc, 1, m);
  const auto in1 = observe(sc, 1, m);
  const RigidTransform to0 = sc.agent(0).pose.inverse();
  const RigidTransform j_to_0 = to0 * sc.agent(1).pose;
  for (std::size_t k = 0; k < w.size(); ++k) {
    const SemanticGaussian direct = transform_gaussian(w[k], to0);
    const SemanticGaussian via = transform_gaussian(in1[k], j_to_0);
    for (int t = 0; t < 3; ++t) CHECK(std::abs(direct.mean[t] - via.mean[t]) <= 1e-6);
    CHECK(std::abs(std::abs(direct.rotation.dot(via.rotation)) - 1.0) <= 1e-9);
    CHECK(direct.scale == via.scale);
    CHECK(direct.semantics == via.semantics);
  }
}

TEST_CASE("generated scenes") {
  for (std::uint64_t seed : {1, 2, 3, 42}) {
    const SceneSpec s = generate_scene(seed);
    CHECK_NOTHROW(s.validate());
    CHECK(s.agents.size() == 3);
    CHECK(generate_scene(seed) == s);
    for (const auto& a : s.agents) {
      // Lattice-aligned poses.
      for (int k = 0; k < 2; ++k) {
        const double u = (a.pose.translation[k] - s.world_min[k]) / s.voxel_size;
        CHECK(std::abs(u - std::round(u)) < 1e-9);
      }
    }
  }
  GeneratorConfig five;
  for (std::size_t n : {4u, 5u, 7u}) {
    five.num_agents = n;
    for (std::uint64_t seed = 0; seed < 10; ++seed) CHECK(generate_scene(seed, five).agents.size() == n);
  }
}

TEST_CASE("scene JSON round trip and diagnostics") {
  const SceneSpec s = generate_scene(42);
  const std::string text = scene_spec_to_json(s);
  const SceneSpec back = parse_scene_spec(text);
  CHECK(scene_spec_to_json(back) == text);
  CHECK(back.objects.size() == s.objects.size());
  CHECK(back.observation == s.observation);
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    CHECK(back.objects[i].center == s.objects[i].center);
    CHECK(back.objects[i].size == s.objects[i].size);
    CHECK(back.objects[i].cls == s.objects[i].cls);
    CHECK(std::abs(back.objects[i].yaw - s.objects[i].yaw) < 1e-12);
  }
  for (std::size_t i = 0; i < s.agents.size(); ++i) {
    CHECK(back.agents[i].id == s.agents[i].id);
    for (int k = 0; k < 3; ++k) CHECK(std::abs(back.agents[i].pose.translation[k] - s.agents[i].pose.translation[k]) < 1e-12);
    CHECK(std::abs(std::abs(back.agents[i].pose.rotation.dot(s.agents[i].pose.rotation)) - 1.0) < 1e-12);
  }
  CHECK(grids_hash({Scene(back).world()}) == grids_hash({Scene(s).world()}));

  auto message_of = [](const std::string& t) {
    try {
      parse_scene_spec(t);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ConfigError);
      return std::string(e.what());
    }
    FAIL("config accepted");
    return std::string();
  };
  CHECK(message_of("{\n  \"agents\": [\n    {\"position\": [0, 0 0]}\n  ]\n}").find("line 3") != std::string::npos);
  CHECK(message_of(R"({"agents": [{"position": [0, 0]}]})").find("agents[0].position") != std::string::npos);
  CHECK(message_of(R"({"agents": [{"position": [0, 0, 0]}], "objects": [{"kind": "box", "center": [0,0,0], "size": [1,1,1], "class": "road"}]})")
            .find("objects[0].kind") != std::string::npos);
  CHECK(message_of(R"({"agents": [{"position": [0, 0, 0]}], "objects": [{"kind": "wall", "center": [0,0,0], "size": [1,1,1], "class": "lava"}]})")
            .find("objects[0].class") != std::string::npos);
  CHECK(message_of(R"({"objects": []})").find("agents") != std::string::npos);
  CHECK(message_of(R"({"agents": [{"position": [0, 0, 0]}], "observation": {"occlusion": "xray"}})").find("observation.occlusion") !=
        std::string::npos);
  CHECK(message_of(R"({"agents": [{"position": [99, 0, 0]}]})").find("outside the world") != std::string::npos);
  CHECK(message_of(R"({"agents": [{"position": [0, 0, 0]}], "observation": {"postion_noise": 0.1}})")
            .find("observation.postion_noise: unknown field") != std::string::npos);
  CHECK(message_of(R"({"agents": [{"position": [0, 0, 0], "yaw": 90}]})").find("agents[0].yaw") != std::string::npos);
  CHECK(message_of(R"({"agent": []})").find("agent: unknown field") != std::string::npos);
  CHECK(message_of(R"({"agents": [{"position": [0, 0, 0]}], "world": {"min": [0,0,0], "max": [1,1,1], "voxel": 1}})")
            .find("world.voxel") != std::string::npos);
  CHECK_THROWS_AS(parse_observation_model(R"({"label_flips": 0.2})"), Error);

  const SceneSpec minimal = parse_scene_spec(R"({"seed": 9, "agents": [{"position": [0, 0, -1.6]}]})");
  CHECK(minimal.seed == 9);
  CHECK(minimal.agents.size() == 1);
  CHECK(minimal.observation == ObservationModel{});
}

TEST_CASE("mode names and the empty-space prior") {
  for (Mode m : {Mode::Single, Mode::ZeroShot, Mode::Naive, Mode::Learned}) CHECK(mode_from_string(to_string(m)) == m);
  CHECK(std::string(to_string(Mode::ZeroShot)) == "zero_shot");
  CHECK_THROWS_AS(mode_from_string("fused"), Error);
  const SemanticGaussian e = empty_space_gaussian();
  CHECK(e.opacity == 1.0);
  CHECK(e.scale == Vec3{20, 20, 20});
  CHECK(e.semantics[kEmptyClass] == 1.0);
  CHECK(e.mean == Roi{}.center);
  CHECK(is_valid(e));
}

TEST_CASE("one agent: every mode equals single and nothing is sent") {
  kernels::ScopedIsa scalar(kernels::Isa::Scalar);
  SceneSpec s = generate_scene(8);
  s.agents.resize(1);
  const Scene sc(s);
  ObservationModel m;
  m.gaussians_per_agent = 2000;
  EpisodeConfig cfg;
  const EpisodeInputs in = prepare_episode(sc, m, cfg);
  CHECK(in.stats.bytes_sent() == 0);
  const FusionParams fp = FusionParams::random(1, 0.5);
  const CalibrationParams cp;
  const EpisodeResult single = run_mode(in, Mode::Single, cfg, {});
  for (Mode mode : {Mode::ZeroShot, Mode::Naive, Mode::Learned}) {
    const EpisodeResult r = run_mode(in, mode, cfg, {&fp, &cp});
    CHECK(r.channels[0].values == single.channels[0].values);
    CHECK(r.predictions == single.predictions);
    CHECK(r.stats.bytes_sent() == 0);
  }
}

TEST_CASE("a zero budget reduces every collaborative mode to single") {
  kernels::ScopedIsa scalar(kernels::Isa::Scalar);
  const Scene sc(generate_scene(9));
  ObservationModel m;
  m.gaussians_per_agent = 2000;
  EpisodeConfig cfg;
  cfg.budget_bytes = 0;
  const EpisodeInputs in = prepare_episode(sc, m, cfg);
  CHECK(in.stats.bytes_sent() == 0);
  CHECK(in.stats.messages_sent() == 0);
  const FusionParams fp = FusionParams::random(2, 0.5);
  CalibrationParams cp;
  cp.log_gain[3] = 0.4;
  cp.opacity_scale = 1.3;
  const EpisodeResult single = run_mode(in, Mode::Single, cfg, {});
  for (Mode mode : {Mode::ZeroShot, Mode::Naive, Mode::Learned}) {
    const EpisodeResult r = run_mode(in, mode, cfg, {&fp, &cp});
    for (std::size_t a = 0; a < single.channels.size(); ++a) CHECK(r.channels[a].values == single.channels[a].values);
    CHECK(r.predictions == single.predictions);
  }
}

TEST_CASE("stacking only adds evidence") {
  ObservationModel m;
  m.gaussians_per_agent = 3000;
  EpisodeConfig cfg;
  for (std::uint64_t seed : {21, 22, 23}) {
    const Scene sc(generate_scene(seed));
    const EpisodeInputs in = prepare_episode(sc, m, cfg);
    const EpisodeResult single = run_mode(in, Mode::Single, cfg, {});
    const EpisodeResult zs = run_mode(in, Mode::ZeroShot, cfg, {});
    CHECK(zs.stats.bytes_sent() > 0);
    const GroundTruth own = build_ground_truth(sc);
    for (std::size_t a = 0; a < in.own.size(); ++a) {
      std::size_t hit_s = 0, hit_z = 0, occluded_s = 0, occluded_z = 0;
      const LabelGrid& gt = in.ground_truth[a];
      for (std::size_t v = 0; v < gt.labels.size(); ++v) {
        if (gt.labels[v] == kEmptyClass) continue;
        const bool ps = single.predictions[a].labels[v] != kEmptyClass;
        const bool pz = zs.predictions[a].labels[v] != kEmptyClass;
        hit_s += ps;
        hit_z += pz;
        // Collaborative ground truth the ego itself cannot see.
        if (own.per_agent[a].labels[v] == kEmptyClass) {
          occluded_s += ps;
          occluded_z += pz;
        }
        for (std::size_t c = 0; c < kNumClasses; ++c) CHECK(zs.channels[a].at(v, c) >= single.channels[a].at(v, c));
      }
      CHECK(hit_z >= hit_s);
      CHECK(occluded_z > occluded_s);
    }
  }
}

TEST_CASE("learned and naive modes need their parameters") {
  const Scene sc(generate_scene(4));
  ObservationModel m;
  m.gaussians_per_agent = 500;
  EpisodeConfig cfg;
  const EpisodeInputs in = prepare_episode(sc, m, cfg);
  CHECK_THROWS_AS(run_mode(in, Mode::Learned, cfg, {}), InvalidArgument);
  CHECK_THROWS_AS(run_mode(in, Mode::Naive, cfg, {}), InvalidArgument);
}

TEST_CASE("messages on the wire decode to what was received") {
  const Scene sc(generate_scene(12));
  ObservationModel m;
  m.gaussians_per_agent = 1000;
  EpisodeConfig cfg;
  cfg.keep_messages = true;
  cfg.frame_tag = 5;
  const EpisodeInputs in = prepare_episode(sc, m, cfg);
  REQUIRE(in.messages.size() == 6);
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<SemanticGaussian> stacked;
    for (const auto& msg : in.messages) {
      if (msg.receiver != in.agent_ids[i]) continue;
      CHECK(msg.accepted);
      const GaussianMessage d = deserialize_message(msg.bytes);
      CHECK(d.frame_tag == 5);
      CHECK(d.sender_id == msg.sender);
      stacked.insert(stacked.end(), d.gaussians.begin(), d.gaussians.end());
      total += msg.bytes.size();
    }
    CHECK(stacked == in.received[i]);
  }
  CHECK(total == in.stats.bytes_sent());
}

TEST_CASE("golden seed-42 scene and episode") {
  kernels::ScopedIsa scalar(kernels::Isa::Scalar);
  const Scene sc(generate_scene(42));
  const std::uint64_t world = grids_hash({sc.world()});
  CHECK(world == 4830972523654890995ull);

  ObservationModel m;
  m.gaussians_per_agent = 6400;
  EpisodeConfig cfg;
  const EpisodeInputs in = prepare_episode(sc, m, cfg);
  const std::uint64_t gt = grids_hash(in.ground_truth);
  const EpisodeResult single = run_mode(in, Mode::Single, cfg, {});
  const EpisodeResult zs = run_mode(in, Mode::ZeroShot, cfg, {});
  const std::uint64_t ps = grids_hash(single.predictions), pz = grids_hash(zs.predictions);
  CHECK(gt == 13129781619299016681ull);
  CHECK(ps == 2925746635226848591ull);
  CHECK(pz == 9023057992601164419ull);
  CHECK(zs.stats.bytes_sent() == 1141104ull);
  CHECK(single.counts.report().miou == doctest::Approx(0.313532).epsilon(1e-5));
  CHECK(zs.counts.report().miou == doctest::Approx(0.41714).epsilon(1e-5));
}

}  // TEST_SUITE
