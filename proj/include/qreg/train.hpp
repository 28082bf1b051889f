#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qreg/data.hpp"
#include "qreg/errors.hpp"
#include "qreg/nn.hpp"
#include "qreg/pruning.hpp"
#include "qreg/quantization.hpp"
#include "qreg/regularization.hpp"

namespace qreg {

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimState {
  AdamConfig config;
  std::size_t step = 0;
  std::vector<Tensor> m;  // first moments, one per parameter
  std::vector<Tensor> v;  // second moments
};

/// One bias-corrected Adam update of every parameter value in place.
/// Moments are created on the first call. Throws TrainingError naming the
/// parameter when a gradient is not finite, DimensionError on shape mismatch.
void adam_step(const std::vector<NamedNode>& params, const std::vector<Tensor>& grads,
               OptimState& state);
/// Same, reading each parameter's accumulated gradient.
void adam_step(const std::vector<NamedNode>& params, OptimState& state);

// ---------------------------------------------------------------------------
// Metrics

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
double accuracy(const Tensor& logits, std::span<const std::int32_t> labels);

struct F1Scores {
  std::vector<double> per_task;
  double average = 0.0;  // unweighted mean over tasks
};

/// Per-task F1 = 2TP / (2TP + FP + FN), 0 when the denominator is 0. A task
/// is predicted present when sigmoid(logit) > 0.5.
F1Scores f1_per_task(const Tensor& logits, std::span<const std::uint8_t> labels);

/// Fraction of (example, task) entries predicted correctly.
double binary_accuracy(const Tensor& logits, std::span<const std::uint8_t> labels);

// ---------------------------------------------------------------------------
// Runs

enum class Mode {
  none,
  weight_decay,
  dropout,
  label_smoothing,
  early_stopping,
  pruning,
  quantization,
};

const char* to_string(Mode mode);
/// Throws ConfigError for an unknown name.
Mode parse_mode(const std::string& name);

struct TrainConfig {
  Mode mode = Mode::none;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  AdamConfig adam;
  std::uint64_t seed = 0;

  double weight_decay = 0.01;
  double dropout_p = 0.1;
  double label_smoothing = 0.1;
  std::size_t early_stop_patience = 5;
  StopMetric early_stop_metric = StopMetric::val_loss;
  bool early_stopping = false;  // stop early on top of any mode

  QuantConfig quant;
  bool keep_batchnorm = true;  // quantization mode only

  PruneSpec prune{0.75, 0, PruneCriterion::lowest_norm};

  std::string fingerprint;

  void validate() const;
};

struct EpochRow {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double test_acc = 0.0;
  std::vector<double> f1;  // multi-task only
  double f1_avg = 0.0;
};

struct RunRecord {
  std::string fingerprint;
  std::uint64_t seed = 0;
  std::size_t num_tasks = 0;  // 0 for single-task runs
  std::vector<EpochRow> rows;
  std::size_t best_epoch = 0;  // epoch restored by early stopping, else last
  double final_test_acc = 0.0;
  std::vector<double> final_f1;
  double final_f1_avg = 0.0;
};

/// Thrown when the loss or a gradient stops being finite. `partial` holds
/// every epoch completed before the failure.
class DivergenceError : public TrainingError {
 public:
  DivergenceError(const std::string& what, RunRecord partial)
      : TrainingError(what), partial(std::move(partial)) {}
  RunRecord partial;
};

/// Observation points for instrumented runs and tests.
struct TrainHooks {
  // Called with every mini-batch's loss targets before the loss is built.
  std::function<void(const std::vector<std::size_t>& rows, const Tensor& targets)> on_batch;
  std::function<void(const EpochRow&)> on_epoch;
};

struct TrainResult {
  RunRecord record;
  std::vector<Record> final_state;  // model state after the last epoch
  std::vector<Record> best_state;   // early-stopping best, else == final_state
};

/// Trains `model` in place with Adam under the selected regularizer mode.
///
/// Modes act on the run as follows: weight_decay adds the L2 term, dropout
/// activates the model's dropout layers with `dropout_p` (they are inert in
/// every other mode), label_smoothing smooths the training targets,
/// early_stopping restores the best validation epoch, pruning prunes after
/// `prune.warmup_epochs` and fine-tunes, quantization wraps the model with
/// fake quantization. Training data is reshuffled each epoch from `seed`.
TrainResult train(Model& model, const Dataset& train_ds, const Dataset& val_ds,
                  const Dataset& test_ds, const TrainConfig& config, const TrainHooks* hooks = nullptr);

/// Eval-mode logits for a feature tensor, computed in chunks.
Tensor predict(Model& model, const Tensor& features, std::size_t chunk = 512);

/// CSV text: `epoch,train_loss,val_loss,train_acc,val_acc,test_acc` plus
/// `f1_t0..f1_t{T-1},f1_avg` for multi-task runs. Six significant digits.
std::string run_record_csv(const RunRecord& record);

/// Parses run_record_csv output. Throws ParseError on a schema violation.
RunRecord parse_run_record_csv(const std::string& text);

// ---------------------------------------------------------------------------
// Aggregation

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
};

MeanStd mean_std(std::span<const double> values);

struct EpochAggregate {
  std::size_t epoch = 0;
  std::size_t count = 0;  // records that reached this epoch
  MeanStd train_loss, val_loss, train_acc, val_acc, test_acc, f1_avg;
};

struct RunAggregate {
  std::string fingerprint;
  std::size_t runs = 0;
  std::vector<EpochAggregate> epochs;
  MeanStd final_test_acc;
  std::vector<MeanStd> final_f1;
  MeanStd final_f1_avg;
};

/// Mean and sample standard deviation across seeds. Throws ContractError for
/// an empty list or mismatched fingerprints.
RunAggregate aggregate_runs(const std::vector<RunRecord>& records);

}  // namespace qreg
