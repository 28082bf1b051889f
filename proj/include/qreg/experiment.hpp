#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qreg/data.hpp"
#include "qreg/nn.hpp"
#include "qreg/train.hpp"

namespace qreg {

/// Everything one experiment needs. Parsed from a sectioned `key = value`
/// file; see docs/config.md for the grammar and the list of keys.
struct ExperimentConfig {
  // [data]
  std::string data_preset = "blobs";  // blobs | multitask | csv
  std::size_t classes = 10;
  std::size_t features = 32;
  std::size_t tasks = 12;
  std::size_t train_size = 2000;
  std::size_t test_size = 1000;
  double separation = 3.0;
  double val_fraction = 0.1;
  std::uint64_t data_seed = 7;
  std::string train_csv;
  std::string test_csv;
  std::vector<std::size_t> image_shape;  // reshape CSV rows for cnn-small
  bool noise_exclude_original = false;

  // [model]
  std::string model_preset = "mlp-small";  // mlp-small | mlp | cnn-small
  std::vector<std::size_t> hidden{256, 128};
  bool hidden_batchnorm = false;
  std::vector<std::size_t> dropout_layers;  // empty: after every hidden layer
  std::optional<bool> task_norm;            // default: on for multi-task data

  // [train]
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool early_stopping = false;

  // [regularization]
  Mode mode = Mode::none;
  double weight_decay = 0.01;
  double dropout_p = 0.1;
  double label_smoothing = 0.1;
  std::size_t early_stop_patience = 5;
  StopMetric early_stop_metric = StopMetric::val_loss;

  // [quantization]
  QuantConfig quant{4, 4, 8, 0.99, true};
  bool keep_batchnorm = true;

  // [pruning]
  double prune_ratio = 0.75;
  std::optional<std::size_t> prune_warmup_epochs;  // default: epochs / 4
  PruneCriterion prune_criterion = PruneCriterion::lowest_norm;

  // [experiment]
  std::vector<Mode> modes{Mode::none};
  std::vector<double> noise{0.0};
  std::vector<std::uint64_t> seeds{1};
  std::optional<Mode> stability_mode;
  std::vector<double> grid;
  std::optional<double> reference;
  std::string output_dir = "out";

  /// Cross-field checks. Throws ConfigError naming the offending key.
  void validate() const;
};

/// Parses config text. Unknown sections or keys and malformed values throw
/// ConfigError with the line number and key.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// One training run of a sweep.
struct JobSpec {
  Mode mode = Mode::none;
  double noise = 0.0;
  std::uint64_t seed = 1;
  std::optional<double> hyper;  // stability sweeps: bits, ratio or p
  bool force_early_stopping = false;
};

/// Effective settings of one job (without its seed) as sorted `key=value`
/// lines. Equal canonical text means equal results up to the seed.
std::string canonical_job_text(const ExperimentConfig& cfg, const JobSpec& job);
/// 16 hex digits of the FNV-1a hash of canonical_job_text.
std::string fingerprint(const ExperimentConfig& cfg, const JobSpec& job);

struct JobData {
  Dataset train;
  Dataset val;
  Dataset test;
  std::vector<std::size_t> corrupted;
};

/// Builds the datasets of a job: generate or load, split off validation,
/// then corrupt the training part only.
JobData make_job_data(const ExperimentConfig& cfg, const JobSpec& job);
Model make_job_model(const ExperimentConfig& cfg, const Dataset& train, std::uint64_t seed);
TrainConfig make_train_config(const ExperimentConfig& cfg, const JobSpec& job);

struct JobOutcome {
  JobSpec job;
  bool ok = false;
  std::string error;
  TrainResult result;
  Model model;
};

/// Runs one job end to end.
JobOutcome run_job(const ExperimentConfig& cfg, const JobSpec& job);

/// Runs jobs on up to `threads` workers; outcomes keep the input order.
std::vector<JobOutcome> run_jobs(const ExperimentConfig& cfg, const std::vector<JobSpec>& jobs,
                                 std::size_t threads);

/// Worker count from QREG_THREADS, defaulting to the hardware concurrency.
std::size_t thread_budget();

// ---------------------------------------------------------------------------
// Commands. Each returns a process exit code: 0 success, 2 configuration
// error, 3 runtime or training error.

struct CommandOptions {
  std::filesystem::path config;
  std::optional<std::filesystem::path> out;
  std::optional<std::vector<std::uint64_t>> seeds;
  bool quiet = false;
};

int cmd_train(const CommandOptions& opts, std::ostream& log, std::ostream& err);
int cmd_noise_sweep(const CommandOptions& opts, std::ostream& log, std::ostream& err);
int cmd_stability_sweep(const CommandOptions& opts, std::ostream& log, std::ostream& err);
int cmd_multitask(const CommandOptions& opts, std::ostream& log, std::ostream& err);

/// Six-significant-digit formatting shared by every CSV writer.
std::string format_number(double v);

/// Parses a comma-separated table with a fixed header. Throws ParseError
/// when the header differs or a row has the wrong field count.
std::vector<std::map<std::string, std::string>> read_table(const std::filesystem::path& path,
                                                           const std::vector<std::string>& header);

}  // namespace qreg
