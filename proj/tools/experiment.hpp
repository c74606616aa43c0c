#pragma once

// Experiment orchestration behind the gscollab command line: configuration,
// the run / train / export commands, and their file outputs.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "gscollab/comms.hpp"
#include "gscollab/fusion.hpp"
#include "gscollab/learn.hpp"
#include "gscollab/metrics.hpp"
#include "gscollab/sim.hpp"

namespace gscollab::cli {

enum class TrainTarget { Fusion, Calibration };

struct TrainSettings {
  std::size_t steps = 500;
  std::size_t scenes = 20;
  std::uint64_t seed = 1;  // root of the training scene set
  std::size_t holdout_scenes = 20;
  std::uint64_t holdout_seed = 7;
  double peak_lr = 2e-4;
  std::size_t warmup_steps = 50;
  double weight_decay = 0.01;
  TrainTarget target = TrainTarget::Fusion;
  bool warm_start = true;  // identity warm start; random He init otherwise
  std::uint64_t init_seed = 3;
};

/// Everything a run or training job needs. Scenes come either from a scene
/// file or from the generator: one scene uses `seed` directly, several use
/// derive_seed(seed, "scene-set", k).
struct ExperimentConfig {
  std::optional<std::filesystem::path> scene_path;
  std::uint64_t seed = 42;
  std::size_t num_scenes = 1;
  std::size_t num_agents = 3;
  std::vector<Mode> modes{Mode::Single, Mode::ZeroShot};
  /// Observation fields applied over the scene's own model (JSON object).
  std::string observation = "{}";
  std::optional<std::size_t> gaussians;  // overrides observation.gaussians_per_agent
  FusionConfig fusion = default_fusion();
  WirePrecision precision = WirePrecision::Fp16;
  std::optional<std::uint64_t> budget_bytes;
  std::filesystem::path out = "gscollab_out";
  std::optional<std::filesystem::path> params_path;       // FPRM, learned mode
  std::optional<std::filesystem::path> calibration_path;  // FPRM, naive mode
  std::size_t jobs = 0;  // 0: one per hardware thread
  bool dump_messages = false;
  TrainSettings train;

  static FusionConfig default_fusion();
  /// Throws Error(ConfigError) naming the offending field.
  void validate() const;
};

/// Defaults of the train command: the 6400-Gaussian preset and learned mode.
ExperimentConfig default_train_config();

/// Fields present in the JSON document override `base`. Syntax errors carry
/// line and column; schema errors name the field. Throws Error(ConfigError).
ExperimentConfig parse_experiment_config(std::string_view text, const ExperimentConfig& base = {});
std::string experiment_config_to_json(const ExperimentConfig& cfg);

std::vector<Mode> parse_modes(std::string_view csv);
WirePrecision parse_precision(std::string_view s);
Pooling parse_pooling(std::string_view s);

/// Scene specs the config refers to, in order.
std::vector<SceneSpec> load_scenes(const ExperimentConfig& cfg);
ObservationModel effective_observation(const ExperimentConfig& cfg, const SceneSpec& scene);
EpisodeConfig episode_config(const ExperimentConfig& cfg);

struct SceneModeRow {
  std::size_t scene = 0;
  std::uint64_t seed = 0;
  Mode mode = Mode::Single;
  EvalReport report;
  CommStats stats;
};

struct RunSummary {
  std::vector<SceneModeRow> rows;                // scene-major, modes in config order
  std::vector<std::pair<Mode, IouCounts>> totals;  // per mode, summed over scenes
  std::vector<std::pair<Mode, CommStats>> traffic;
};

/// cmd_run: one report row per (scene, mode). Writes into cfg.out:
/// config.json, report.csv, report.txt, comms.csv, and VOXG label grids
/// (grids/sceneNNN/{gt,<mode>}_agentK.voxg); with dump_messages also the
/// GMSG messages (messages/sceneNNN/S_to_R.gmsg).
RunSummary cmd_run(const ExperimentConfig& cfg, std::ostream& log);

struct TrainSummary {
  std::vector<StepRecord> curve;
  // mIoU per split for single, zero_shot and the trained mode.
  std::vector<std::pair<Mode, EvalReport>> train, holdout;
  std::filesystem::path params_file;
};

/// cmd_train: trains fusion (or calibration) parameters on the training
/// scene set, then evaluates on the training and holdout sets with the
/// parameters as written to disk. Writes config.json, fusion.fprm or
/// calibration.fprm, loss_curve.csv and train_report.csv into cfg.out.
TrainSummary cmd_train(const ExperimentConfig& cfg, std::ostream& log);

struct ExportSummary {
  std::array<std::uint64_t, kNumClasses> counts{};
};

/// Per-voxel CSV of a VOXG grid. Lines starting with '#' carry the
/// geometry; then "x,y,z,label" rows (label grids) or "x,y,z,c0..c12" rows
/// with float values printed losslessly (channel grids).
std::string grid_to_csv(const VoxgContent& grid);
/// Inverse of grid_to_csv. Throws Error(ConfigError) on malformed input.
VoxgContent grid_from_csv(std::string_view text);
/// Voxel count per class; channel grids are labeled by argmax first.
std::array<std::uint64_t, kNumClasses> class_counts(const VoxgContent& grid);
std::string class_counts_csv(const std::array<std::uint64_t, kNumClasses>& counts);

/// cmd_export: reads a VOXG file and writes <out>.voxels.csv and
/// <out>.counts.csv; the counts are also printed. Decode errors propagate.
ExportSummary cmd_export(const std::filesystem::path& grid, const std::filesystem::path& out, std::ostream& log);

std::string report_csv(const RunSummary& s);
std::string report_table(const RunSummary& s);

std::vector<std::uint8_t> read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> bytes);
void write_file(const std::filesystem::path& p, std::string_view text);

}  // namespace gscollab::cli
