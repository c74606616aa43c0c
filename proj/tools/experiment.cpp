#include "experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "gscollab/error.hpp"
#include "gscollab/rng.hpp"
#include "gscollab/splat.hpp"

namespace gscollab::cli {
namespace {

using nlohmann::json;

[[noreturn]] void config_error(const std::string& path, const std::string& what) {
  throw Error(ErrorCode::ConfigError, path + ": " + what);
}

std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t scene_seed(std::uint64_t root, std::size_t count, std::size_t k) {
  return count == 1 ? root : derive_seed(root, "scene-set", k);
}

// Runs f(0..n-1) on up to `jobs` threads; the first failure (by index) is rethrown.
template <typename F>
void parallel_for(std::size_t n, std::size_t jobs, F&& f) {
  if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min(jobs, n);
  if (jobs <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Config parsing

std::uint64_t uint_field(const json& v, const std::string& path) {
  if (!v.is_number_unsigned()) config_error(path, "expected a non-negative integer");
  return v.get<std::uint64_t>();
}

double number_field(const json& v, const std::string& path) {
  if (!v.is_number()) config_error(path, "expected a number");
  return v.get<double>();
}

std::string string_field(const json& v, const std::string& path) {
  if (!v.is_string()) config_error(path, "expected a string");
  return v.get<std::string>();
}

bool bool_field(const json& v, const std::string& path) {
  if (!v.is_boolean()) config_error(path, "expected true or false");
  return v.get<bool>();
}

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) config_error(path, "expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      config_error(path.empty() ? key : path + "." + key, "unknown field");
    }
  }
}

template <typename F>
auto wrap(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigError && std::string_view(e.what()).starts_with(path)) throw;
    config_error(path, e.what());
  }
}

ReceivedPolicy parse_received(std::string_view s) {
  if (s == "discard") return ReceivedPolicy::Discard;
  if (s == "keep_unmatched") return ReceivedPolicy::KeepUnmatched;
  if (s == "keep_all") return ReceivedPolicy::KeepAll;
  throw InvalidArgument("unknown received policy '" + std::string(s) + "' (discard, keep_unmatched, keep_all)");
}

const char* received_name(ReceivedPolicy p) {
  switch (p) {
    case ReceivedPolicy::Discard: return "discard";
    case ReceivedPolicy::KeepUnmatched: return "keep_unmatched";
    case ReceivedPolicy::KeepAll: return "keep_all";
  }
  return "?";
}

const char* target_name(TrainTarget t) { return t == TrainTarget::Fusion ? "fusion" : "calibration"; }

Mode trained_mode(TrainTarget t) { return t == TrainTarget::Fusion ? Mode::Learned : Mode::Naive; }

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

void parse_train(const json& j, TrainSettings& t) {
  check_keys(j, "train", {"steps", "scenes", "seed", "holdout_scenes", "holdout_seed", "peak_lr", "warmup_steps",
                          "weight_decay", "target", "init", "init_seed"});
  if (auto it = j.find("steps"); it != j.end()) t.steps = uint_field(*it, "train.steps");
  if (auto it = j.find("scenes"); it != j.end()) t.scenes = uint_field(*it, "train.scenes");
  if (auto it = j.find("seed"); it != j.end()) t.seed = uint_field(*it, "train.seed");
  if (auto it = j.find("holdout_scenes"); it != j.end()) t.holdout_scenes = uint_field(*it, "train.holdout_scenes");
  if (auto it = j.find("holdout_seed"); it != j.end()) t.holdout_seed = uint_field(*it, "train.holdout_seed");
  if (auto it = j.find("peak_lr"); it != j.end()) t.peak_lr = number_field(*it, "train.peak_lr");
  if (auto it = j.find("warmup_steps"); it != j.end()) t.warmup_steps = uint_field(*it, "train.warmup_steps");
  if (auto it = j.find("weight_decay"); it != j.end()) t.weight_decay = number_field(*it, "train.weight_decay");
  if (auto it = j.find("target"); it != j.end()) {
    const std::string s = string_field(*it, "train.target");
    if (s == "fusion") t.target = TrainTarget::Fusion;
    else if (s == "calibration") t.target = TrainTarget::Calibration;
    else config_error("train.target", "expected \"fusion\" or \"calibration\"");
  }
  if (auto it = j.find("init"); it != j.end()) {
    const std::string s = string_field(*it, "train.init");
    if (s != "warm" && s != "random") config_error("train.init", "expected \"warm\" or \"random\"");
    t.warm_start = s == "warm";
  }
  if (auto it = j.find("init_seed"); it != j.end()) t.init_seed = uint_field(*it, "train.init_seed");
}

void parse_fusion(const json& j, FusionConfig& f) {
  check_keys(j, "fusion", {"rho", "pooling", "epsilon", "max_neighbors", "received"});
  if (auto it = j.find("rho"); it != j.end()) f.radius_rho = number_field(*it, "fusion.rho");
  if (auto it = j.find("pooling"); it != j.end()) {
    const std::string s = string_field(*it, "fusion.pooling");
    f.pooling = wrap("fusion.pooling", [&] { return parse_pooling(s); });
  }
  if (auto it = j.find("epsilon"); it != j.end()) f.epsilon = number_field(*it, "fusion.epsilon");
  if (auto it = j.find("max_neighbors"); it != j.end()) f.max_neighbors = uint_field(*it, "fusion.max_neighbors");
  if (auto it = j.find("received"); it != j.end()) {
    const std::string s = string_field(*it, "fusion.received");
    f.received_policy = wrap("fusion.received", [&] { return parse_received(s); });
  }
}

// ---------------------------------------------------------------------------
// Files

std::string scene_dir(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene%03zu", k);
  return buf;
}

EvalReport report_of(const IouCounts& c) { return c.report(); }

std::string optional_value(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::string optional_cell(const std::optional<double>& v) { return v ? fmt(*v, 4) : std::string("-"); }

std::string pad(std::string s, std::size_t w, bool left = true) {
  if (s.size() >= w) return s;
  return left ? s + std::string(w - s.size(), ' ') : std::string(w - s.size(), ' ') + s;
}

}  // namespace

// ---------------------------------------------------------------------------
// ExperimentConfig

FusionConfig ExperimentConfig::default_fusion() {
  FusionConfig f;
  f.received_policy = ReceivedPolicy::KeepAll;
  return f;
}

void ExperimentConfig::validate() const {
  if (modes.empty()) config_error("modes", "at least one mode is required");
  if (num_scenes == 0) config_error("num_scenes", "must be positive");
  if (num_agents < 1 || num_agents > 7) config_error("num_agents", "must be between 1 and 7");
  if (scene_path) {
    if (!std::filesystem::is_regular_file(*scene_path)) config_error("scene", "no such file: " + scene_path->string());
    if (num_scenes != 1) config_error("num_scenes", "a scene file gives exactly one scene");
  }
  if (params_path && !std::filesystem::is_regular_file(*params_path)) {
    config_error("params", "no such file: " + params_path->string());
  }
  if (calibration_path && !std::filesystem::is_regular_file(*calibration_path)) {
    config_error("calibration", "no such file: " + calibration_path->string());
  }
  if (gaussians && *gaussians == 0) config_error("gaussians", "must be positive");
  wrap("fusion", [&] {
    fusion.validate();
    return 0;
  });
  wrap("observation", [&] { return parse_observation_model(observation); });
  if (train.scenes == 0) config_error("train.scenes", "must be positive");
  if (train.holdout_scenes == 0) config_error("train.holdout_scenes", "must be positive");
  if (!(train.peak_lr > 0.0)) config_error("train.peak_lr", "must be positive");
  if (!(train.weight_decay >= 0.0)) config_error("train.weight_decay", "must be >= 0");
}

ExperimentConfig default_train_config() {
  ExperimentConfig c;
  c.gaussians = 6400;
  c.modes = {Mode::Single, Mode::ZeroShot, Mode::Learned};
  return c;
}

std::vector<Mode> parse_modes(std::string_view csv) {
  std::vector<Mode> modes;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const std::size_t end = std::min(csv.find(',', start), csv.size());
    const std::string_view name = csv.substr(start, end - start);
    if (name.empty()) throw InvalidArgument("empty mode name in '" + std::string(csv) + "'");
    const Mode m = mode_from_string(name);
    if (std::find(modes.begin(), modes.end(), m) != modes.end()) {
      throw InvalidArgument("mode '" + std::string(name) + "' given twice");
    }
    modes.push_back(m);
    start = end + 1;
  }
  return modes;
}

WirePrecision parse_precision(std::string_view s) {
  if (s == "fp16") return WirePrecision::Fp16;
  if (s == "fp32") return WirePrecision::Fp32;
  throw InvalidArgument("unknown precision '" + std::string(s) + "' (fp16, fp32)");
}

Pooling parse_pooling(std::string_view s) {
  if (s == "mean") return Pooling::Mean;
  if (s == "attention") return Pooling::Attention;
  throw InvalidArgument("unknown pooling '" + std::string(s) + "' (mean, attention)");
}

ExperimentConfig parse_experiment_config(std::string_view text, const ExperimentConfig& base) {
  json j;
  try {
    j = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    const auto [line, col] = line_col(text, e.byte > 0 ? e.byte - 1 : 0);
    throw Error(ErrorCode::ConfigError,
                "experiment config: syntax error at line " + std::to_string(line) + ", column " + std::to_string(col));
  }
  check_keys(j, "", {"scene", "seed", "num_scenes", "num_agents", "modes", "observation", "gaussians", "fusion",
                     "precision", "budget_bytes", "out", "params", "calibration", "jobs", "dump_messages", "train"});
  ExperimentConfig c = base;
  if (auto it = j.find("scene"); it != j.end()) {
    if (it->is_null()) c.scene_path.reset();
    else c.scene_path = string_field(*it, "scene");
  }
  if (auto it = j.find("seed"); it != j.end()) c.seed = uint_field(*it, "seed");
  if (auto it = j.find("num_scenes"); it != j.end()) c.num_scenes = uint_field(*it, "num_scenes");
  if (auto it = j.find("num_agents"); it != j.end()) c.num_agents = uint_field(*it, "num_agents");
  if (auto it = j.find("modes"); it != j.end()) {
    std::string joined;
    if (it->is_string()) {
      joined = it->get<std::string>();
    } else if (it->is_array()) {
      for (std::size_t i = 0; i < it->size(); ++i) {
        if (i) joined += ',';
        joined += string_field((*it)[i], "modes[" + std::to_string(i) + "]");
      }
    } else {
      config_error("modes", "expected an array of mode names");
    }
    c.modes = wrap("modes", [&] { return parse_modes(joined); });
  }
  if (auto it = j.find("observation"); it != j.end()) {
    if (!it->is_object()) config_error("observation", "expected an object");
    json merged = json::parse(c.observation);
    merged.update(*it);
    c.observation = merged.dump();
    wrap("observation", [&] { return parse_observation_model(c.observation); });
  }
  if (auto it = j.find("gaussians"); it != j.end()) c.gaussians = uint_field(*it, "gaussians");
  if (auto it = j.find("fusion"); it != j.end()) parse_fusion(*it, c.fusion);
  if (auto it = j.find("precision"); it != j.end()) {
    const std::string s = string_field(*it, "precision");
    c.precision = wrap("precision", [&] { return parse_precision(s); });
  }
  if (auto it = j.find("budget_bytes"); it != j.end()) {
    if (it->is_null()) c.budget_bytes.reset();
    else c.budget_bytes = uint_field(*it, "budget_bytes");
  }
  if (auto it = j.find("out"); it != j.end()) c.out = string_field(*it, "out");
  if (auto it = j.find("params"); it != j.end()) c.params_path = string_field(*it, "params");
  if (auto it = j.find("calibration"); it != j.end()) c.calibration_path = string_field(*it, "calibration");
  if (auto it = j.find("jobs"); it != j.end()) c.jobs = uint_field(*it, "jobs");
  if (auto it = j.find("dump_messages"); it != j.end()) c.dump_messages = bool_field(*it, "dump_messages");
  if (auto it = j.find("train"); it != j.end()) parse_train(*it, c.train);
  return c;
}

std::string experiment_config_to_json(const ExperimentConfig& c) {
  json j;
  j["scene"] = c.scene_path ? json(c.scene_path->generic_string()) : json(nullptr);
  j["seed"] = c.seed;
  j["num_scenes"] = c.num_scenes;
  j["num_agents"] = c.num_agents;
  j["modes"] = json::array();
  for (Mode m : c.modes) j["modes"].push_back(to_string(m));
  j["observation"] = json::parse(c.observation);
  j["gaussians"] = c.gaussians ? json(*c.gaussians) : json(nullptr);
  j["fusion"] = {{"rho", c.fusion.radius_rho},
                 {"pooling", c.fusion.pooling == Pooling::Mean ? "mean" : "attention"},
                 {"epsilon", c.fusion.epsilon},
                 {"max_neighbors", c.fusion.max_neighbors},
                 {"received", received_name(c.fusion.received_policy)}};
  j["precision"] = c.precision == WirePrecision::Fp16 ? "fp16" : "fp32";
  j["budget_bytes"] = c.budget_bytes ? json(*c.budget_bytes) : json(nullptr);
  j["out"] = c.out.generic_string();
  if (c.params_path) j["params"] = c.params_path->generic_string();
  if (c.calibration_path) j["calibration"] = c.calibration_path->generic_string();
  j["jobs"] = c.jobs;
  j["dump_messages"] = c.dump_messages;
  j["train"] = {{"steps", c.train.steps},
                {"scenes", c.train.scenes},
                {"seed", c.train.seed},
                {"holdout_scenes", c.train.holdout_scenes},
                {"holdout_seed", c.train.holdout_seed},
                {"peak_lr", c.train.peak_lr},
                {"warmup_steps", c.train.warmup_steps},
                {"weight_decay", c.train.weight_decay},
                {"target", target_name(c.train.target)},
                {"init", c.train.warm_start ? "warm" : "random"},
                {"init_seed", c.train.init_seed}};
  return j.dump(2) + "\n";
}

std::vector<SceneSpec> load_scenes(const ExperimentConfig& cfg) {
  if (cfg.scene_path) {
    const auto bytes = read_file(*cfg.scene_path);
    return {parse_scene_spec(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()))};
  }
  GeneratorConfig g;
  g.num_agents = cfg.num_agents;
  std::vector<SceneSpec> out;
  for (std::size_t k = 0; k < cfg.num_scenes; ++k) out.push_back(generate_scene(scene_seed(cfg.seed, cfg.num_scenes, k), g));
  return out;
}

ObservationModel effective_observation(const ExperimentConfig& cfg, const SceneSpec& scene) {
  ObservationModel m = parse_observation_model(cfg.observation, scene.observation);
  if (cfg.gaussians) m.gaussians_per_agent = *cfg.gaussians;
  return m;
}

EpisodeConfig episode_config(const ExperimentConfig& cfg) {
  EpisodeConfig e;
  e.fusion = cfg.fusion;
  e.precision = cfg.precision;
  e.budget_bytes = cfg.budget_bytes;
  e.keep_messages = cfg.dump_messages;
  return e;
}

// ---------------------------------------------------------------------------
// run

namespace {

struct SceneOutcome {
  std::uint64_t seed = 0;
  std::vector<std::uint32_t> agent_ids;
  std::vector<LabelGrid> ground_truth;
  std::vector<SentMessage> messages;
  std::vector<EpisodeResult> results;  // config mode order, channels dropped
};

struct LoadedParams {
  std::optional<FusionParams> fusion;
  std::optional<CalibrationParams> calibration;
  ModeParams view() const { return {fusion ? &*fusion : nullptr, calibration ? &*calibration : nullptr}; }
};

LoadedParams load_params(const ExperimentConfig& cfg, const std::vector<Mode>& modes) {
  LoadedParams p;
  const bool learned = std::find(modes.begin(), modes.end(), Mode::Learned) != modes.end();
  const bool naive = std::find(modes.begin(), modes.end(), Mode::Naive) != modes.end();
  if (learned) {
    if (!cfg.params_path) config_error("params", "learned mode needs a fusion parameter file");
    p.fusion = decode_fusion_params(read_file(*cfg.params_path));
  }
  if (naive) {
    if (!cfg.calibration_path) config_error("calibration", "naive mode needs a calibration parameter file");
    p.calibration = decode_calibration(read_file(*cfg.calibration_path));
  }
  return p;
}

}  // namespace

RunSummary cmd_run(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const LoadedParams params = load_params(cfg, cfg.modes);
  const std::vector<SceneSpec> specs = load_scenes(cfg);
  const EpisodeConfig ecfg = episode_config(cfg);

  std::vector<SceneOutcome> outcomes(specs.size());
  std::mutex log_mutex;
  parallel_for(specs.size(), cfg.jobs, [&](std::size_t k) {
    const Scene scene(specs[k]);
    EpisodeInputs in = prepare_episode(scene, effective_observation(cfg, specs[k]), ecfg);
    SceneOutcome& o = outcomes[k];
    o.seed = specs[k].seed;
    for (Mode m : cfg.modes) {
      EpisodeResult r = run_mode(in, m, ecfg, params.view());
      r.channels.clear();
      o.results.push_back(std::move(r));
    }
    o.agent_ids = std::move(in.agent_ids);
    o.ground_truth = std::move(in.ground_truth);
    o.messages = std::move(in.messages);
    std::lock_guard lock(log_mutex);
    log << "scene " << k << " (seed " << o.seed << ") done\n";
  });

  RunSummary s;
  for (Mode m : cfg.modes) {
    s.totals.emplace_back(m, IouCounts{});
    s.traffic.emplace_back(m, CommStats{});
  }
  for (std::size_t k = 0; k < outcomes.size(); ++k) {
    for (std::size_t i = 0; i < cfg.modes.size(); ++i) {
      const EpisodeResult& r = outcomes[k].results[i];
      s.rows.push_back({k, outcomes[k].seed, cfg.modes[i], report_of(r.counts), r.stats});
      s.totals[i].second += r.counts;
      s.traffic[i].second.merge(r.stats);
    }
  }

  // Outputs, written serially in a fixed order.
  std::filesystem::create_directories(cfg.out);
  write_file(cfg.out / "config.json", experiment_config_to_json(cfg));
  write_file(cfg.out / "report.csv", report_csv(s));
  const std::string table = report_table(s);
  write_file(cfg.out / "report.txt", table);
  std::string comms = "scene,mode,sender,receiver,messages,gaussians,bytes,rejected\n";
  for (const auto& row : s.rows) {
    for (const auto& [link, st] : row.stats.links()) {
      comms += std::to_string(row.scene) + "," + to_string(row.mode) + "," + std::to_string(link.first) + "," +
               std::to_string(link.second) + "," + std::to_string(st.messages) + "," + std::to_string(st.gaussians) +
               "," + std::to_string(st.bytes) + "," + std::to_string(st.rejected) + "\n";
    }
  }
  write_file(cfg.out / "comms.csv", comms);
  for (std::size_t k = 0; k < outcomes.size(); ++k) {
    const SceneOutcome& o = outcomes[k];
    const auto dir = cfg.out / "grids" / scene_dir(k);
    std::filesystem::create_directories(dir);
    for (std::size_t a = 0; a < o.agent_ids.size(); ++a) {
      const std::string agent = "_agent" + std::to_string(o.agent_ids[a]) + ".voxg";
      write_file(dir / ("gt" + agent), encode_voxg(o.ground_truth[a]));
      for (std::size_t i = 0; i < cfg.modes.size(); ++i) {
        write_file(dir / (std::string(to_string(cfg.modes[i])) + agent), encode_voxg(o.results[i].predictions[a]));
      }
    }
    if (cfg.dump_messages) {
      const auto mdir = cfg.out / "messages" / scene_dir(k);
      std::filesystem::create_directories(mdir);
      for (const SentMessage& m : o.messages) {
        const std::string name = std::to_string(m.sender) + "_to_" + std::to_string(m.receiver) +
                                 (m.accepted ? ".gmsg" : ".rejected.gmsg");
        write_file(mdir / name, m.bytes);
      }
    }
  }
  log << table;
  return s;
}

std::string report_csv(const RunSummary& s) {
  std::string out = "scene,seed,mode,iou,miou";
  const auto& names = class_names();
  for (std::size_t c = 0; c < kNumSemanticClasses; ++c) out += std::string(",iou_") + names[c];
  for (std::size_t b = 0; b < kNumBevCategories; ++b) out += std::string(",bev_") + to_string(static_cast<BevCategory>(b));
  out += ",messages,gaussians,bytes_sent\n";
  auto line = [&](const std::string& scene, const std::string& seed, Mode m, const EvalReport& r, const CommStats& st) {
    out += scene + "," + seed + "," + to_string(m) + "," + fmt(r.iou) + "," + fmt(r.miou);
    for (const auto& v : r.per_class_iou) out += "," + optional_value(v);
    for (const auto& v : r.bev_iou) out += "," + optional_value(v);
    out += "," + std::to_string(st.messages_sent()) + "," + std::to_string(st.gaussians_sent()) + "," +
           std::to_string(st.bytes_sent()) + "\n";
  };
  for (const auto& row : s.rows) line(std::to_string(row.scene), std::to_string(row.seed), row.mode, row.report, row.stats);
  for (std::size_t i = 0; i < s.totals.size(); ++i) {
    line("all", "", s.totals[i].first, s.totals[i].second.report(), s.traffic[i].second);
  }
  return out;
}

std::string report_table(const RunSummary& s) {
  std::ostringstream o;
  const std::size_t scenes = s.totals.empty() ? 0 : s.rows.size() / s.totals.size();
  o << "Summary over " << scenes << (scenes == 1 ? " scene" : " scenes") << "\n";
  o << pad("mode", 11) << pad("IoU", 8, false) << pad("mIoU", 8, false) << pad("BEV veh", 9, false)
    << pad("BEV road", 9, false) << pad("BEV oth", 9, false) << pad("messages", 10, false) << pad("bytes_sent", 12, false)
    << "\n";
  for (std::size_t i = 0; i < s.totals.size(); ++i) {
    const EvalReport r = s.totals[i].second.report();
    const CommStats& st = s.traffic[i].second;
    o << pad(to_string(s.totals[i].first), 11) << pad(fmt(r.iou, 4), 8, false) << pad(fmt(r.miou, 4), 8, false);
    for (const auto& b : r.bev_iou) o << pad(optional_cell(b), 9, false);
    o << pad(std::to_string(st.messages_sent()), 10, false) << pad(std::to_string(st.bytes_sent()), 12, false) << "\n";
  }
  o << "\nPer-class IoU\n" << pad("class", 14);
  for (const auto& [m, _] : s.totals) o << pad(to_string(m), 11, false);
  o << "\n";
  for (std::size_t c = 0; c < kNumSemanticClasses; ++c) {
    o << pad(class_names()[c], 14);
    for (const auto& [_, counts] : s.totals) o << pad(optional_cell(counts.report().per_class_iou[c]), 11, false);
    o << "\n";
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// train

namespace {

std::vector<EpisodeInputs> prepare_set(const ExperimentConfig& cfg, std::uint64_t root, std::size_t count,
                                       const EpisodeConfig& ecfg) {
  std::vector<EpisodeInputs> out(count);
  GeneratorConfig g;
  g.num_agents = cfg.num_agents;
  parallel_for(count, cfg.jobs, [&](std::size_t k) {
    const SceneSpec spec = generate_scene(scene_seed(root, count, k), g);
    const Scene scene(spec);
    out[k] = prepare_episode(scene, effective_observation(cfg, spec), ecfg);
  });
  return out;
}

std::vector<std::pair<Mode, EvalReport>> evaluate(const std::vector<EpisodeInputs>& set, const std::vector<Mode>& modes,
                                                  const EpisodeConfig& ecfg, const ModeParams& params, std::size_t jobs) {
  std::vector<std::vector<IouCounts>> per_scene(set.size(), std::vector<IouCounts>(modes.size()));
  parallel_for(set.size(), jobs, [&](std::size_t k) {
    for (std::size_t i = 0; i < modes.size(); ++i) per_scene[k][i] = run_mode(set[k], modes[i], ecfg, params).counts;
  });
  std::vector<std::pair<Mode, EvalReport>> out;
  for (std::size_t i = 0; i < modes.size(); ++i) {
    IouCounts total;
    for (const auto& s : per_scene) total += s[i];
    out.emplace_back(modes[i], total.report());
  }
  return out;
}

}  // namespace

TrainSummary cmd_train(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  if (cfg.scene_path) config_error("scene", "training uses generated scene sets; drop the scene file");
  const TrainSettings& ts = cfg.train;
  EpisodeConfig ecfg = episode_config(cfg);
  ecfg.keep_messages = false;

  const auto train_set = prepare_set(cfg, ts.seed, ts.scenes, ecfg);
  std::vector<TrainSample> samples;
  for (const auto& in : train_set)
    for (auto& s : training_samples(in)) samples.push_back(std::move(s));
  log << "training on " << samples.size() << " samples from " << ts.scenes << " scenes\n";

  TrainConfig tc;
  tc.max_steps = ts.steps;
  tc.epochs = std::max<std::size_t>(1, (ts.steps + samples.size() - 1) / samples.size());
  tc.peak_lr = ts.peak_lr;
  tc.warmup_steps = ts.warmup_steps;
  tc.weight_decay = ts.weight_decay;
  tc.seed = ts.seed;
  const auto on_step = [&](const StepRecord& r) {
    if (r.step % 25 == 0 || r.step + 1 == ts.steps) {
      log << "step " << r.step << " lr " << std::scientific << std::setprecision(3) << r.lr << std::defaultfloat
          << " ce " << fmt(r.loss.ce, 4) << " lovasz " << fmt(r.loss.lovasz, 4) << " total " << fmt(r.loss.total, 4)
          << "\n";
    }
  };

  TrainSummary out;
  std::filesystem::create_directories(cfg.out);
  std::vector<std::uint8_t> bytes;
  if (ts.target == TrainTarget::Fusion) {
    const FusionParams init = ts.warm_start ? identity_warm_start(samples, cfg.fusion, ts.init_seed)
                                            : FusionParams::random(ts.init_seed);
    FusionTrainResult r{init, {}};
    if (ts.steps > 0) r = train_fusion(init, samples, cfg.fusion, ecfg.splat, tc, on_step);
    out.curve = std::move(r.curve);
    bytes = encode_fusion_params(r.params);
    out.params_file = cfg.out / "fusion.fprm";
  } else {
    CalibrationTrainResult r{CalibrationParams{}, {}};
    if (ts.steps > 0) r = train_calibration(r.params, samples, ecfg.splat, tc, on_step);
    out.curve = std::move(r.curve);
    bytes = encode_calibration(r.params);
    out.params_file = cfg.out / "calibration.fprm";
  }
  write_file(out.params_file, bytes);
  write_file(cfg.out / "loss_curve.csv", loss_curve_csv(out.curve));

  // Evaluate with the parameters as stored on disk.
  std::optional<FusionParams> fp;
  std::optional<CalibrationParams> cp;
  if (ts.target == TrainTarget::Fusion) fp = decode_fusion_params(bytes);
  else cp = decode_calibration(bytes);
  const ModeParams mp{fp ? &*fp : nullptr, cp ? &*cp : nullptr};
  const std::vector<Mode> modes{Mode::Single, Mode::ZeroShot, trained_mode(ts.target)};
  out.train = evaluate(train_set, modes, ecfg, mp, cfg.jobs);
  const auto holdout_set = prepare_set(cfg, ts.holdout_seed, ts.holdout_scenes, ecfg);
  out.holdout = evaluate(holdout_set, modes, ecfg, mp, cfg.jobs);

  std::string csv = "split,mode,iou,miou\n";
  std::ostringstream table;
  table << pad("split", 9);
  for (Mode m : modes) table << pad(std::string(to_string(m)) + " mIoU", 16, false);
  table << "\n";
  for (const auto& [name, rows] : {std::pair{"train", &out.train}, std::pair{"holdout", &out.holdout}}) {
    table << pad(name, 9);
    for (const auto& [m, r] : *rows) {
      csv += std::string(name) + "," + to_string(m) + "," + fmt(r.iou) + "," + fmt(r.miou) + "\n";
      table << pad(fmt(r.miou, 4), 16, false);
    }
    table << "\n";
  }
  write_file(cfg.out / "train_report.csv", csv);
  write_file(cfg.out / "config.json", experiment_config_to_json(cfg));
  log << table.str();
  return out;
}

// ---------------------------------------------------------------------------
// export

std::string grid_to_csv(const VoxgContent& grid) {
  std::string out;
  auto header = [&](const GridGeometry& g, const char* kind) {
    out += std::string("# voxg ") + kind + "\n";
    out += "# dims " + std::to_string(g.dims[0]) + " " + std::to_string(g.dims[1]) + " " + std::to_string(g.dims[2]) + "\n";
    out += "# origin " + exact(g.origin[0]) + " " + exact(g.origin[1]) + " " + exact(g.origin[2]) + "\n";
    out += "# voxel_size " + exact(g.voxel_size) + "\n";
  };
  auto coords = [&](const GridGeometry& g, std::size_t v) {
    const auto c = g.coords(v);
    return std::to_string(c[0]) + "," + std::to_string(c[1]) + "," + std::to_string(c[2]);
  };
  if (const auto* labels = std::get_if<LabelGrid>(&grid)) {
    header(labels->geometry, "labels");
    out += "x,y,z,label\n";
    for (std::size_t v = 0; v < labels->labels.size(); ++v) {
      out += coords(labels->geometry, v) + "," + std::to_string(labels->labels[v]) + "\n";
    }
  } else {
    const auto& ch = std::get<ChannelGrid>(grid);
    header(ch.geometry, "channels");
    out += "x,y,z";
    for (std::size_t c = 0; c < kNumClasses; ++c) out += ",c" + std::to_string(c);
    out += "\n";
    for (std::size_t v = 0; v < ch.geometry.num_voxels(); ++v) {
      out += coords(ch.geometry, v);
      for (double x : ch.voxel(v)) out += "," + exact(x);
      out += "\n";
    }
  }
  return out;
}

VoxgContent grid_from_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) -> void {
    throw Error(ErrorCode::ConfigError, "voxel csv line " + std::to_string(line_no) + ": " + what);
  };
  std::string kind;
  GridGeometry g;
  int seen = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] != '#') break;
    std::istringstream ls(line.substr(1));
    std::string key;
    ls >> key;
    if (key == "voxg") {
      ls >> kind;
      seen |= 1;
    } else if (key == "dims") {
      ls >> g.dims[0] >> g.dims[1] >> g.dims[2];
      seen |= 2;
    } else if (key == "origin") {
      ls >> g.origin[0] >> g.origin[1] >> g.origin[2];
      seen |= 4;
    } else if (key == "voxel_size") {
      ls >> g.voxel_size;
      seen |= 8;
    }
    if (ls.fail()) fail("bad header line");
  }
  if (seen != 15 || (kind != "labels" && kind != "channels")) fail("incomplete header");
  try {
    g.validate();
  } catch (const Error& e) {
    fail(e.what());
  }
  const bool labels = kind == "labels";
  const std::size_t values = labels ? 1 : kNumClasses;
  LabelGrid lg(g);
  ChannelGrid cg(g);
  std::vector<bool> filled(g.num_voxels(), false);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string_view> cells;
    std::string_view rest(line);
    for (;;) {
      const auto comma = rest.find(',');
      cells.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (cells.size() != 3 + values) fail("expected " + std::to_string(3 + values) + " columns");
    std::array<std::uint32_t, 3> c{};
    for (int a = 0; a < 3; ++a) {
      const auto r = std::from_chars(cells[a].data(), cells[a].data() + cells[a].size(), c[a]);
      if (r.ec != std::errc() || r.ptr != cells[a].data() + cells[a].size() || c[a] >= g.dims[a]) fail("bad voxel index");
    }
    const std::size_t v = g.index(c[0], c[1], c[2]);
    if (filled[v]) fail("voxel listed twice");
    filled[v] = true;
    ++rows;
    if (labels) {
      unsigned label = 0;
      const auto& s = cells[3];
      const auto r = std::from_chars(s.data(), s.data() + s.size(), label);
      if (r.ec != std::errc() || r.ptr != s.data() + s.size() || label >= kNumClasses) fail("bad label");
      lg.labels[v] = static_cast<std::uint8_t>(label);
    } else {
      for (std::size_t k = 0; k < kNumClasses; ++k) {
        const auto& s = cells[3 + k];
        double x = 0.0;
        const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
        if (r.ec != std::errc() || r.ptr != s.data() + s.size()) fail("bad channel value");
        cg.values[v * kNumClasses + k] = x;
      }
    }
  }
  if (rows != g.num_voxels()) {
    throw Error(ErrorCode::ConfigError, "voxel csv: " + std::to_string(rows) + " voxel rows, expected " +
                                            std::to_string(g.num_voxels()));
  }
  if (labels) return lg;
  return cg;
}

std::array<std::uint64_t, kNumClasses> class_counts(const VoxgContent& grid) {
  std::array<std::uint64_t, kNumClasses> counts{};
  const LabelGrid labels =
      std::holds_alternative<LabelGrid>(grid) ? std::get<LabelGrid>(grid) : labels_from_channels(std::get<ChannelGrid>(grid));
  for (std::uint8_t l : labels.labels) ++counts[l];
  return counts;
}

std::string class_counts_csv(const std::array<std::uint64_t, kNumClasses>& counts) {
  std::string out = "class,name,count\n";
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    out += std::to_string(c) + "," + class_names()[c] + "," + std::to_string(counts[c]) + "\n";
  }
  return out;
}

ExportSummary cmd_export(const std::filesystem::path& grid, const std::filesystem::path& out, std::ostream& log) {
  const VoxgContent content = decode_voxg(read_file(grid));
  ExportSummary s;
  s.counts = class_counts(content);
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  write_file(out.string() + ".voxels.csv", grid_to_csv(content));
  const std::string counts = class_counts_csv(s.counts);
  write_file(out.string() + ".counts.csv", counts);
  log << counts;
  return s;
}

// ---------------------------------------------------------------------------
// Files

std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error(ErrorCode::Io, "cannot open " + p.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (f.bad()) throw Error(ErrorCode::Io, "cannot read " + p.string());
  return bytes;
}

void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::Io, "cannot create " + p.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error(ErrorCode::Io, "cannot write " + p.string());
}

void write_file(const std::filesystem::path& p, std::string_view text) {
  write_file(p, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace gscollab::cli
