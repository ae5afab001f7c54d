#pragma once

// Experiment configuration file and the commands built on it. The CLI is a
// thin argument layer over these functions.
//
// Config files are JSON objects with the sections below; every key is
// optional and unknown keys are errors.
//
//   seed            integer, drives model init and data order (default 42)
//   output          run directory (default <output root>/<config stem>/<command>)
//   formats         subset of ["json", "csv", "svg"]
//   dataset         source, path, synthetic, resize, normalize, split names,
//                   extra_eval, kfold, fold
//   model           preset ("toy" | "paper") then channels, backbone, neck,
//                   cnn, fusion, decoder, ablation overrides
//   training        lr, weight_decay, step_size, gamma, batch_size,
//                   max_epochs, patience, monitor, clip_norm
//   tuner           n_trials, trial_epochs, trial_patience, lr, weight_decay,
//                   step_size, gamma ([min, max] pairs)
//   sweep           betas, epochs
//   ablate          epochs, cnn_widths

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cafe/datasets.hpp"
#include "cafe/model.hpp"
#include "cafe/training.hpp"
#include "json.hpp"

namespace cafe {

struct DatasetSection {
  /// synthetic | manifest | sen1floods11 | floodplanet
  std::string source = "synthetic";
  /// Manifest file for "manifest", dataset root for the directory layouts.
  std::string path;
  SyntheticDatasetSpec synthetic;
  SignalPlacement signal_placement = SignalPlacement::both;
  std::optional<std::pair<int, int>> resize;
  bool normalize = true;
  std::string train_split = "train";
  std::string val_split = "val";
  std::string test_split = "test";
  /// Further named splits scored after training (e.g. a held-out region).
  std::vector<std::string> extra_eval;
  KFoldConfig kfold;
  /// When set, fold `fold` of kfold_split replaces the named splits.
  std::optional<int> fold;
};

struct SweepSection {
  std::vector<double> betas{0.2, 0.4, 0.6, 0.8};
  std::optional<int> epochs;
};

struct AblateSection {
  std::optional<int> epochs;
  std::vector<std::vector<int>> cnn_widths{{16, 32, 64, 128}, {32, 64, 128, 256}, {64, 128, 256, 512}, {128, 256, 512, 1024}};
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::string output;
  std::vector<std::string> formats{"json", "csv", "svg"};
  DatasetSection dataset;
  std::string model_preset = "toy";
  ModelConfig model = toy_config();
  TrainConfig training;
  TunerConfig tuner;
  SweepSection sweep;
  AblateSection ablate;

  bool wants(const std::string& format) const;
};

/// Throws ConfigError naming the offending key path.
ExperimentConfig parse_experiment(const nlohmann::json& j);
/// Every field with defaults filled in; parsing the result gives the same config.
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig load_experiment(const std::filesystem::path& path);
/// Cross-section checks (model shapes, training and tuner bounds).
std::vector<std::string> validate(const ExperimentConfig& c);

/// Raw (unnormalized) samples and the split each belongs to.
struct Dataset {
  std::vector<TileSample> samples;
  std::vector<std::string> split;
};

/// Throws ConfigError when the configured path does not exist.
Dataset load_dataset(const DatasetSection& d, const ChannelSplitConfig& channels);

struct Partition {
  std::vector<TileSample> train, val, test;
  std::vector<std::pair<std::string, std::vector<TileSample>>> extra;
  ChannelStats stats;
};

/// Selects samples by split name, or by fold when given, and normalizes
/// everything with statistics of the training part.
Partition make_partition(const Dataset& data, const DatasetSection& d, const std::optional<FoldSplit>& fold = {});

/// Directory of one command invocation.
struct RunDir {
  std::filesystem::path path;
  explicit RunDir(std::filesystem::path p);
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

/// Default output root: $CAFE_OUTPUT_ROOT, else "runs".
std::filesystem::path output_root();

struct TrainOutcome {
  TrainState<float> state;
  MetricReport validation;
  std::optional<MetricReport> test;
  std::vector<std::pair<std::string, MetricReport>> extra;
  std::int64_t trainable_parameters = 0;
};

/// Trains one model and writes config.json, history.csv, best.ckpt,
/// last.ckpt, report.json, per_image.csv and loss.svg into dir.
TrainOutcome cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& dir, bool resume, std::ostream& log);

MetricReport cmd_evaluate(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                          const std::string& split, const std::filesystem::path& dir, std::ostream& log);

TuneResult cmd_tune(const ExperimentConfig& cfg, const std::filesystem::path& dir, std::ostream& log);

/// Runs the listed folds (all when empty) into dir/fold_<i>, then writes
/// aggregate.json, per_image.csv and per_image_box.svg once every fold has a
/// report.
nlohmann::json cmd_kfold(const ExperimentConfig& cfg, const std::filesystem::path& dir, const std::vector<int>& folds,
                         std::ostream& log);

struct SweepRow {
  double beta = 0.0;
  double val_miou = 0.0;
  std::optional<double> test_miou;
};

std::vector<SweepRow> cmd_beta_sweep(const ExperimentConfig& cfg, const std::vector<double>& betas,
                                     const std::filesystem::path& dir, std::ostream& log);

struct AblationRow {
  std::string name;
  AblationFlags flags;
  std::vector<int> widths;
  std::int64_t trainable_parameters = 0;
  double val_miou = 0.0, val_mdice = 0.0;
  std::optional<double> test_miou, test_mdice;
  int epochs = 0;
  std::uint64_t seed = 0;
};

/// Module toggle rows of the ablation table; the "adaptation only" row is
/// split into a variant without the CNN branch and one with a plain CNN.
std::vector<std::pair<std::string, AblationFlags>> module_ablation_rows();

std::vector<AblationRow> cmd_ablate(const ExperimentConfig& cfg, const std::string& table,
                                    const std::filesystem::path& dir, std::ostream& log);

DatasetManifest cmd_synth_data(const ExperimentConfig& cfg, const std::filesystem::path& dir, std::ostream& log);

/// Prints the per-component table; returns it for callers that need numbers.
Inventory cmd_inventory(const ModelConfig& model, bool as_json, std::ostream& out);

enum class EmbeddingStage { pre_fusion_ap, pre_fusion_cnn, post_fusion };
EmbeddingStage parse_embedding_stage(const std::string& s);
std::string to_string(EmbeddingStage s);

struct EmbeddingExport {
  int channels = 0, height = 0, width = 0;
  std::filesystem::path features, rendering;
};

/// Level is 1-based. Writes <stage>_L<level>.bin/.json and .png into dir.
EmbeddingExport cmd_export_embeddings(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& checkpoint,
                                      const std::string& sample, int level, EmbeddingStage stage,
                                      const std::filesystem::path& dir, std::ostream& log);

/// Hex SHA-256 of the text.
std::string sha256_hex(const std::string& text);

/// Writes run.json: command, arguments, config hash, code version, seed,
/// status and timing.
void write_run_manifest(const std::filesystem::path& dir, const std::string& command,
                        const std::vector<std::string>& args, const ExperimentConfig* cfg, const std::string& status,
                        double seconds);

const char* code_version();

}  // namespace cafe
