#include "cafe/cli.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <ostream>

#include "CLI11.hpp"
#include "cafe/checkpoint.hpp"
#include "cafe/experiment.hpp"

namespace cafe {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::string output;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
};

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.training.seed = *c.seed;
    cfg.tuner.seed = *c.seed;
  }
  if (c.epochs) cfg.training.max_epochs = *c.epochs;
  return cfg;
}

fs::path run_dir(const Common& c, const ExperimentConfig& cfg, const std::string& command) {
  if (!c.output.empty()) return c.output;
  if (!cfg.output.empty()) return cfg.output;
  const std::string stem = c.config.empty() ? "default" : fs::path(c.config).stem().string();
  return output_root() / stem / command;
}

void add_common(CLI::App* sub, Common& c, bool config_required) {
  auto* opt = sub->add_option("config", c.config, "experiment config (JSON)");
  if (config_required) opt->required();
  sub->add_option("-o,--output", c.output, "run directory");
  sub->add_option("--seed", c.seed, "override the config seed");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Flood segmentation with an adapted ViT and a CNN branch"};
  app.require_subcommand(1);

  Common common;
  bool resume = false;
  std::string checkpoint, split = "test", table = "modules", preset, sample, stage = "post_fusion";
  std::vector<int> folds;
  std::optional<int> k;
  std::vector<double> betas;
  std::optional<int> trials;
  bool as_json = false;
  int level = 1;

  auto* train = app.add_subcommand("train", "train one model");
  add_common(train, common, true);
  train->add_option("--epochs", common.epochs, "override training.max_epochs");
  train->add_flag("--resume", resume, "continue from last.ckpt in the run directory");

  auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint on one split");
  add_common(evaluate, common, true);
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  evaluate->add_option("--split", split, "train, val, test or an extra_eval split");

  auto* tune = app.add_subcommand("tune", "random hyperparameter search");
  add_common(tune, common, true);
  tune->add_option("--trials", trials, "override tuner.n_trials");

  auto* kfold = app.add_subcommand("kfold", "k-fold cross validation");
  add_common(kfold, common, true);
  kfold->add_option("--epochs", common.epochs, "override training.max_epochs");
  kfold->add_option("--k", k, "override dataset.kfold.k");
  kfold->add_option("--fold", folds, "run only these folds (repeatable)");

  auto* sweep = app.add_subcommand("beta-sweep", "train once per fusion bias");
  add_common(sweep, common, true);
  sweep->add_option("--betas", betas, "override sweep.betas")->delimiter(',');

  auto* ablate = app.add_subcommand("ablate", "ablation table");
  add_common(ablate, common, true);
  ablate->add_option("table", table, "modules or cnn_widths")->required();

  auto* synth = app.add_subcommand("synth-data", "write a synthetic dataset with a manifest");
  add_common(synth, common, false);

  auto* inventory = app.add_subcommand("inventory", "parameter counts per component");
  inventory->add_option("config", common.config, "experiment config (JSON)");
  inventory->add_option("--preset", preset, "toy or paper (overrides the config model)");
  inventory->add_flag("--json", as_json, "print JSON");

  auto* embed = app.add_subcommand("export-embeddings", "dump one pyramid level and its PCA rendering");
  add_common(embed, common, true);
  embed->add_option("--checkpoint", checkpoint, "checkpoint file (default: fresh initialization)");
  embed->add_option("--sample", sample, "sample id (default: first test sample)");
  embed->add_option("--level", level, "pyramid level 1..4");
  embed->add_option("--stage", stage, "pre_fusion_ap, pre_fusion_cnn or post_fusion");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string command = chosen->get_name();
  const auto start = std::chrono::steady_clock::now();
  std::optional<ExperimentConfig> cfg;
  std::optional<fs::path> dir;
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  auto finish = [&](const std::string& status) {
    if (!dir) return;
    try {
      write_run_manifest(*dir, command, args, cfg ? &*cfg : nullptr, status, elapsed());
    } catch (const std::exception& e) {
      err << "warning: could not write run.json: " << e.what() << '\n';
    }
  };

  try {
    if (command == "inventory") {
      ModelConfig model = common.config.empty() ? toy_config() : load(common).model;
      if (preset == "toy") model = toy_config();
      else if (preset == "paper") model = paper_scale_config();
      else if (!preset.empty()) throw ConfigError("--preset must be toy or paper");
      const auto errors = validate(model);
      if (!errors.empty()) throw ConfigError("invalid model: " + errors.front());
      cmd_inventory(model, as_json, out);
      return 0;
    }

    cfg = load(common);
    if (k) cfg->dataset.kfold.k = *k;
    if (trials) cfg->tuner.n_trials = *trials;
    dir = run_dir(common, *cfg, command);
    fs::create_directories(*dir);

    if (command == "train") {
      cmd_train(*cfg, *dir, resume, out);
    } else if (command == "evaluate") {
      cmd_evaluate(*cfg, checkpoint, split, *dir, out);
    } else if (command == "tune") {
      cmd_tune(*cfg, *dir, out);
    } else if (command == "kfold") {
      cmd_kfold(*cfg, *dir, folds, out);
    } else if (command == "beta-sweep") {
      cmd_beta_sweep(*cfg, betas.empty() ? cfg->sweep.betas : betas, *dir, out);
    } else if (command == "ablate") {
      cmd_ablate(*cfg, table, *dir, out);
    } else if (command == "synth-data") {
      cmd_synth_data(*cfg, *dir, out);
    } else if (command == "export-embeddings") {
      std::optional<fs::path> ckpt;
      if (!checkpoint.empty()) ckpt = checkpoint;
      cmd_export_embeddings(*cfg, ckpt, sample, level, parse_embedding_stage(stage), *dir, out);
    }
    out << "run directory: " << dir->string() << '\n';
    finish("success");
    return 0;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    finish("config_error");
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    finish("failed");
    return 1;
  }
}

}  // namespace cafe
