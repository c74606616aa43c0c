#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "experiment.hpp"
#include "gscollab/error.hpp"

using namespace gscollab;
using namespace gscollab::cli;

namespace {

// Flags shared by run and train. Values are applied over the config file.
struct CommonFlags {
  std::string config, scene, modes, precision, pooling, received, out, params, calibration, observation;
  std::uint64_t seed = 0, budget = 0;
  std::size_t scenes = 0, agents = 0, gaussians = 0, jobs = 0;
  double rho = 0.0;
  bool serial = false, dump = false;
  CLI::Option *o_seed, *o_budget, *o_scenes, *o_agents, *o_gaussians, *o_jobs, *o_rho;

  void add(CLI::App& app) {
    app.add_option("--config", config, "Experiment config (JSON); flags override it")->check(CLI::ExistingFile);
    app.add_option("--scene", scene, "Scene spec file (JSON) instead of generated scenes")->check(CLI::ExistingFile);
    o_seed = app.add_option("--seed", seed, "Root seed of the generated scenes");
    o_scenes = app.add_option("--scenes", scenes, "Number of generated scenes");
    o_agents = app.add_option("--agents", agents, "Agents per generated scene (1-7)");
    app.add_option("--modes", modes, "Comma-separated modes: single,zero_shot,naive,learned");
    o_gaussians = app.add_option("--gaussians", gaussians, "Gaussians observed per agent");
    app.add_option("--observation", observation, "Observation model overrides as a JSON object");
    app.add_option("--precision", precision, "Wire precision")->check(CLI::IsMember({"fp16", "fp32"}));
    o_budget = app.add_option("--budget-bytes", budget, "Per-message byte budget");
    o_rho = app.add_option("--rho", rho, "Fusion neighborhood radius in meters");
    app.add_option("--pooling", pooling, "Proposal pooling")->check(CLI::IsMember({"mean", "attention"}));
    app.add_option("--received", received, "What happens to received Gaussians after fusion")
        ->check(CLI::IsMember({"discard", "keep_unmatched", "keep_all"}));
    app.add_option("--params", params, "Fusion parameters (FPRM) for learned mode")->check(CLI::ExistingFile);
    app.add_option("--calibration", calibration, "Calibration parameters (FPRM) for naive mode")
        ->check(CLI::ExistingFile);
    app.add_option("--out", out, "Output directory");
    o_jobs = app.add_option("--jobs", jobs, "Worker threads over scenes (0: all cores)");
    app.add_flag("--serial", serial, "Run scenes one at a time")->excludes(o_jobs);
    app.add_flag("--dump-messages", dump, "Write every GMSG message under <out>/messages");
  }

  ExperimentConfig apply(ExperimentConfig c) const {
    if (!config.empty()) {
      const auto bytes = read_file(config);
      c = parse_experiment_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), c);
    }
    if (!scene.empty()) c.scene_path = scene;
    if (o_seed->count()) c.seed = seed;
    if (o_scenes->count()) c.num_scenes = scenes;
    if (o_agents->count()) c.num_agents = agents;
    if (!modes.empty()) c.modes = parse_modes(modes);
    if (o_gaussians->count()) c.gaussians = gaussians;
    if (!observation.empty()) {
      c = parse_experiment_config("{\"observation\": " + observation + "}", c);
    }
    if (!precision.empty()) c.precision = parse_precision(precision);
    if (o_budget->count()) c.budget_bytes = budget;
    if (o_rho->count()) c.fusion.radius_rho = rho;
    if (!pooling.empty()) c.fusion.pooling = parse_pooling(pooling);
    if (!received.empty()) {
      c = parse_experiment_config("{\"fusion\": {\"received\": \"" + received + "\"}}", c);
    }
    if (!params.empty()) c.params_path = params;
    if (!calibration.empty()) c.calibration_path = calibration;
    if (!out.empty()) c.out = out;
    if (o_jobs->count()) c.jobs = jobs;
    if (serial) c.jobs = 1;
    if (dump) c.dump_messages = true;
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Collaborative semantic occupancy with Gaussian messages: simulate, train, evaluate"};
  app.require_subcommand(1);

  CommonFlags run_flags;
  CLI::App* run = app.add_subcommand("run", "Run modes on scenes and write reports, grids and traffic");
  run_flags.add(*run);

  CommonFlags train_flags;
  CLI::App* train = app.add_subcommand("train", "Train fusion or calibration parameters and compare on a holdout set");
  train_flags.add(*train);
  std::size_t steps = 0, train_scenes = 0, holdout_scenes = 0;
  std::uint64_t train_seed = 0, holdout_seed = 0, init_seed = 0;
  double lr = 0.0;
  std::string target, init;
  auto* o_steps = train->add_option("--steps", steps, "Optimizer steps (0 writes the initial parameters)");
  auto* o_tscenes = train->add_option("--train-scenes", train_scenes, "Training scenes");
  auto* o_tseed = train->add_option("--train-seed", train_seed, "Root seed of the training scenes");
  auto* o_hscenes = train->add_option("--holdout-scenes", holdout_scenes, "Holdout scenes");
  auto* o_hseed = train->add_option("--holdout-seed", holdout_seed, "Root seed of the holdout scenes");
  auto* o_lr = train->add_option("--lr", lr, "Peak learning rate");
  auto* o_iseed = train->add_option("--init-seed", init_seed, "Seed of the parameter initialization");
  train->add_option("--target", target, "What to train")->check(CLI::IsMember({"fusion", "calibration"}));
  train->add_option("--init", init, "Initialization")->check(CLI::IsMember({"warm", "random"}));

  std::string grid_path, export_out;
  CLI::App* exp = app.add_subcommand("export", "Dump a VOXG grid as per-voxel CSV plus class counts");
  exp->add_option("grid", grid_path, "VOXG file")->required()->check(CLI::ExistingFile);
  exp->add_option("--out", export_out, "Output prefix (default: the grid path without extension)");

  std::uint64_t scene_seed = 42;
  std::size_t scene_agents = 3;
  std::string scene_out;
  CLI::App* scene = app.add_subcommand("scene", "Write a generated scene spec as JSON");
  scene->add_option("--seed", scene_seed, "Generator seed");
  scene->add_option("--agents", scene_agents, "Number of agents (1-7)");
  scene->add_option("--out", scene_out, "Output file (default: stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      cmd_run(run_flags.apply(ExperimentConfig{}), std::cout);
    } else if (train->parsed()) {
      ExperimentConfig c = train_flags.apply(default_train_config());
      if (o_steps->count()) c.train.steps = steps;
      if (o_tscenes->count()) c.train.scenes = train_scenes;
      if (o_tseed->count()) c.train.seed = train_seed;
      if (o_hscenes->count()) c.train.holdout_scenes = holdout_scenes;
      if (o_hseed->count()) c.train.holdout_seed = holdout_seed;
      if (o_lr->count()) c.train.peak_lr = lr;
      if (o_iseed->count()) c.train.init_seed = init_seed;
      if (!target.empty() || !init.empty()) {
        std::string j = "{\"train\": {";
        if (!target.empty()) j += "\"target\": \"" + target + "\"";
        if (!init.empty()) j += std::string(target.empty() ? "" : ", ") + "\"init\": \"" + init + "\"";
        c = parse_experiment_config(j + "}}", c);
      }
      cmd_train(c, std::cout);
    } else if (exp->parsed()) {
      std::filesystem::path out = export_out;
      if (out.empty()) out = std::filesystem::path(grid_path).replace_extension();
      cmd_export(grid_path, out, std::cout);
    } else if (scene->parsed()) {
      GeneratorConfig g;
      g.num_agents = scene_agents;
      const std::string text = scene_spec_to_json(generate_scene(scene_seed, g));
      if (scene_out.empty()) std::cout << text;
      else write_file(scene_out, text);
    }
  } catch (const Error& e) {
    std::cerr << "gscollab: " << to_string(e.code()) << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "gscollab: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
