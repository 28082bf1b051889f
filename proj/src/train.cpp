#include "qreg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "qreg/qat.hpp"

namespace qreg {

void adam_step(const std::vector<NamedNode>& params, const std::vector<Tensor>& grads,
               OptimState& state) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.node.shape());
      state.v.emplace_back(p.node.shape());
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].node.shape() || state.m[i].shape() != params[i].node.shape()) {
      throw DimensionError("adam_step: shape mismatch for " + params[i].name);
    }
    if (!grads[i].all_finite()) throw TrainingError("non-finite gradient for parameter " + params[i].name);
  }
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Node param = params[i].node;
    Tensor& theta = param.mutable_value();
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < theta.numel(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      theta[k] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

void adam_step(const std::vector<NamedNode>& params, OptimState& state) {
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.node.grad());
  adam_step(params, grads, state);
}

// ---------------------------------------------------------------------------

double accuracy(const Tensor& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("accuracy: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    correct += static_cast<std::int32_t>(best) == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

F1Scores f1_per_task(const Tensor& logits, std::span<const std::uint8_t> labels) {
  if (logits.rank() != 2 || logits.numel() != labels.size()) {
    throw DimensionError("f1_per_task: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), t = logits.dim(1);
  F1Scores out;
  out.per_task.resize(t);
  for (std::size_t k = 0; k < t; ++k) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool pred = logits.at(i, k) > 0.0;
      const bool truth = labels[i * t + k] != 0;
      tp += pred && truth;
      fp += pred && !truth;
      fn += !pred && truth;
    }
    const std::size_t denom = 2 * tp + fp + fn;
    out.per_task[k] = denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  out.average = std::accumulate(out.per_task.begin(), out.per_task.end(), 0.0) / static_cast<double>(t);
  return out;
}

double binary_accuracy(const Tensor& logits, std::span<const std::uint8_t> labels) {
  if (logits.numel() != labels.size()) throw DimensionError("binary_accuracy: size mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += (logits[i] > 0.0) == (labels[i] != 0);
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------

const char* to_string(Mode mode) {
  switch (mode) {
    case Mode::none: return "none";
    case Mode::weight_decay: return "weight_decay";
    case Mode::dropout: return "dropout";
    case Mode::label_smoothing: return "label_smoothing";
    case Mode::early_stopping: return "early_stopping";
    case Mode::pruning: return "pruning";
    case Mode::quantization: return "quantization";
  }
  return "?";
}

Mode parse_mode(const std::string& name) {
  for (Mode m : {Mode::none, Mode::weight_decay, Mode::dropout, Mode::label_smoothing,
                 Mode::early_stopping, Mode::pruning, Mode::quantization}) {
    if (name == to_string(m)) return m;
  }
  throw ConfigError("unknown mode '" + name + "'");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(adam.lr >= 0.0)) throw ConfigError("lr must be non-negative");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must be in [0, 1)");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw ConfigError("label_smoothing must be in [0, 1)");
  }
  if (!(prune.ratio >= 0.0 && prune.ratio < 1.0)) throw ConfigError("prune_ratio must be in [0, 1)");
  try {
    quant.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
}

namespace {

struct EvalMetrics {
  double loss = 0.0;
  double acc = 0.0;
  F1Scores f1;
};

EvalMetrics evaluate(Model& model, const Dataset& ds) {
  EvalMetrics m;
  const Tensor logits = predict(model, ds.features);
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), 0);
  const Tensor targets = ds.targets(all);
  const Node z = Node::constant(logits);
  if (ds.multitask) {
    m.loss = binary_ce_loss(z, targets).value()[0];
    m.acc = binary_accuracy(logits, ds.task_labels);
    m.f1 = f1_per_task(logits, ds.task_labels);
  } else {
    m.loss = cross_entropy_loss(z, targets).value()[0];
    m.acc = accuracy(logits, ds.labels);
  }
  return m;
}

// Contiguous batch boundaries over a permutation. A trailing batch of one
// example is merged into its predecessor so batch statistics stay defined.
std::vector<std::pair<std::size_t, std::size_t>> batches(std::size_t n, std::size_t size) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t b = 0; b < n; b += size) out.emplace_back(b, std::min(n, b + size));
  if (out.size() > 1 && out.back().second - out.back().first == 1) {
    out[out.size() - 2].second = out.back().second;
    out.pop_back();
  }
  return out;
}

}  // namespace

Tensor predict(Model& model, const Tensor& features, std::size_t chunk) {
  ForwardContext ctx;
  const std::size_t n = features.dim(0);
  if (n <= chunk) return model.forward(features, ctx).value();
  std::vector<double> out;
  std::size_t cols = 0;
  for (std::size_t b = 0; b < n; b += chunk) {
    const Tensor logits = model.forward(features.slice_rows(b, std::min(n, b + chunk)), ctx).value();
    cols = logits.dim(1);
    out.insert(out.end(), logits.data().begin(), logits.data().end());
  }
  return Tensor(Shape{n, cols}, std::move(out));
}

TrainResult train(Model& model, const Dataset& train_ds, const Dataset& val_ds,
                  const Dataset& test_ds, const TrainConfig& config, const TrainHooks* hooks) {
  config.validate();
  if (train_ds.size() == 0 || val_ds.size() == 0 || test_ds.size() == 0) {
    throw ContractError("train: datasets must be non-empty");
  }
  const bool multitask = train_ds.multitask;

  if (config.mode == Mode::quantization) {
    model = wrap_model(config.keep_batchnorm ? std::move(model) : without_batchnorm(model),
                       config.quant);
  }
  const double drop = config.mode == Mode::dropout ? config.dropout_p : 0.0;
  for (auto& l : model.layers()) {
    if (l.kind == LayerKind::dropout) l.dropout_p = drop;
  }

  std::mt19937_64 rng(config.seed ^ 0x5851f42d4c957f2dULL);
  OptimState opt{config.adam, 0, {}, {}};
  auto params = model.parameters();

  const bool stop_early = config.mode == Mode::early_stopping || config.early_stopping;
  EarlyStopState stop{config.early_stop_patience, config.early_stop_metric};

  const bool pruning = config.mode == Mode::pruning;
  bool pruned = false;
  auto prune_now = [&] {
    model = prune_model(model, config.prune);
    params = model.parameters();
    opt = OptimState{config.adam, 0, {}, {}};
    stop = EarlyStopState{config.early_stop_patience, config.early_stop_metric};
    pruned = true;
  };
  if (pruning && config.prune.warmup_epochs == 0) prune_now();

  TrainResult result;
  RunRecord& rec = result.record;
  rec.fingerprint = config.fingerprint;
  rec.seed = config.seed;
  rec.num_tasks = multitask ? train_ds.num_tasks : 0;

  std::vector<std::size_t> order(train_ds.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0, acc_sum = 0.0;
    for (auto [b, e] : batches(order.size(), config.batch_size)) {
      std::vector<std::size_t> rows(order.begin() + b, order.begin() + e);
      const Tensor x = train_ds.features.gather_rows(rows);
      Tensor targets = train_ds.targets(rows);
      if (config.mode == Mode::label_smoothing) {
        targets = smooth_labels(targets, config.label_smoothing, multitask ? 2 : train_ds.num_classes);
      }
      if (hooks && hooks->on_batch) hooks->on_batch(rows, targets);

      ForwardContext ctx{true, &rng, nullptr};
      Node logits = model.forward(x, ctx);
      Node data_loss = multitask ? binary_ce_loss(logits, targets) : cross_entropy_loss(logits, targets);
      Node loss = data_loss;
      if (config.mode == Mode::weight_decay) {
        const auto w = model.weights();
        loss = add(loss, weight_decay_loss(w, config.weight_decay));
      }
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw DivergenceError("loss diverged at epoch " + std::to_string(epoch), rec);
      }
      backward(loss);
      try {
        adam_step(params, opt);
      } catch (const TrainingError& e) {
        throw DivergenceError(e.what(), rec);
      }
      for (auto& p : params) p.node.zero_grad();

      const double count = static_cast<double>(rows.size());
      loss_sum += data_loss.value()[0] * count;
      if (multitask) {
        std::vector<std::uint8_t> lab;
        lab.reserve(rows.size() * train_ds.num_tasks);
        for (auto r : rows) {
          lab.insert(lab.end(), train_ds.task_labels.begin() + r * train_ds.num_tasks,
                     train_ds.task_labels.begin() + (r + 1) * train_ds.num_tasks);
        }
        acc_sum += binary_accuracy(logits.value(), lab) * count;
      } else {
        std::vector<std::int32_t> lab;
        lab.reserve(rows.size());
        for (auto r : rows) lab.push_back(train_ds.labels[r]);
        acc_sum += accuracy(logits.value(), lab) * count;
      }
    }

    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(order.size());
    row.train_acc = acc_sum / static_cast<double>(order.size());
    const EvalMetrics val = evaluate(model, val_ds);
    const EvalMetrics test = evaluate(model, test_ds);
    row.val_loss = val.loss;
    row.val_acc = val.acc;
    row.test_acc = test.acc;
    if (multitask) {
      row.f1 = test.f1.per_task;
      row.f1_avg = test.f1.average;
    }
    if (!std::isfinite(row.train_loss) || !std::isfinite(row.val_loss)) {
      throw DivergenceError("loss diverged at epoch " + std::to_string(epoch), rec);
    }
    rec.rows.push_back(row);
    if (hooks && hooks->on_epoch) hooks->on_epoch(row);

    bool stop_now = false;
    if (stop_early) {
      const double metric = config.early_stop_metric == StopMetric::val_loss ? val.loss : val.acc;
      const auto d = early_stop_step(stop, metric);
      if (d.improved) {
        result.best_state = model_state(model);
        rec.best_epoch = epoch;
      }
      stop_now = d.stop;
    }
    if (pruning && !pruned && epoch == config.prune.warmup_epochs) prune_now();
    if (stop_now) break;
  }

  result.final_state = model_state(model);
  if (stop_early && !result.best_state.empty()) {
    apply_model_state(model, result.best_state);
  } else {
    result.best_state = result.final_state;
    rec.best_epoch = rec.rows.empty() ? 0 : rec.rows.back().epoch;
  }
  const EvalMetrics fin = evaluate(model, test_ds);
  rec.final_test_acc = fin.acc;
  if (multitask) {
    rec.final_f1 = fin.f1.per_task;
    rec.final_f1_avg = fin.f1.average;
  }
  return result;
}

// ---------------------------------------------------------------------------

namespace {

void append_num(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  out += buf;
}

}  // namespace

std::string run_record_csv(const RunRecord& record) {
  std::string out = "epoch,train_loss,val_loss,train_acc,val_acc,test_acc";
  for (std::size_t t = 0; t < record.num_tasks; ++t) out += ",f1_t" + std::to_string(t);
  if (record.num_tasks) out += ",f1_avg";
  out += '\n';
  for (const auto& r : record.rows) {
    out += std::to_string(r.epoch);
    for (double v : {r.train_loss, r.val_loss, r.train_acc, r.val_acc, r.test_acc}) {
      out += ',';
      append_num(out, v);
    }
    if (record.num_tasks) {
      for (double v : r.f1) {
        out += ',';
        append_num(out, v);
      }
      out += ',';
      append_num(out, r.f1_avg);
    }
    out += '\n';
  }
  return out;
}

RunRecord parse_run_record_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("run record: empty", 1);
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) header.push_back(tok);
  }
  const std::vector<std::string> base{"epoch", "train_loss", "val_loss", "train_acc", "val_acc", "test_acc"};
  if (header.size() < base.size() || !std::equal(base.begin(), base.end(), header.begin())) {
    throw ParseError("run record: unexpected header '" + line + "'", 1);
  }
  RunRecord rec;
  if (header.size() > base.size()) {
    rec.num_tasks = header.size() - base.size() - 1;
    if (rec.num_tasks == 0 || header.back() != "f1_avg") throw ParseError("run record: bad F1 columns", 1);
    for (std::size_t t = 0; t < rec.num_tasks; ++t) {
      if (header[base.size() + t] != "f1_t" + std::to_string(t)) {
        throw ParseError("run record: bad F1 column " + header[base.size() + t], 1);
      }
    }
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::vector<double> vals;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        std::size_t used = 0;
        vals.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ParseError("run record line " + std::to_string(lineno) + ": bad number '" + tok + "'", lineno);
      }
    }
    if (vals.size() != header.size()) {
      throw ParseError("run record line " + std::to_string(lineno) + ": wrong field count", lineno);
    }
    EpochRow r;
    r.epoch = static_cast<std::size_t>(vals[0]);
    if (r.epoch != (rec.rows.empty() ? 1 : rec.rows.back().epoch + 1)) {
      throw ParseError("run record line " + std::to_string(lineno) + ": epochs not consecutive", lineno);
    }
    r.train_loss = vals[1];
    r.val_loss = vals[2];
    r.train_acc = vals[3];
    r.val_acc = vals[4];
    r.test_acc = vals[5];
    if (rec.num_tasks) {
      r.f1.assign(vals.begin() + 6, vals.begin() + 6 + static_cast<long>(rec.num_tasks));
      r.f1_avg = vals.back();
    }
    rec.rows.push_back(std::move(r));
  }
  return rec;
}

// ---------------------------------------------------------------------------

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) return {};
  // Sorted summation makes the result independent of input order.
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

RunAggregate aggregate_runs(const std::vector<RunRecord>& records) {
  if (records.empty()) throw ContractError("aggregate_runs: no records");
  RunAggregate agg;
  agg.fingerprint = records.front().fingerprint;
  agg.runs = records.size();
  std::size_t max_epochs = 0;
  for (const auto& r : records) {
    if (r.fingerprint != agg.fingerprint) {
      throw ContractError("aggregate_runs: fingerprint " + r.fingerprint + " differs from " + agg.fingerprint);
    }
    max_epochs = std::max(max_epochs, r.rows.size());
  }
  for (std::size_t e = 0; e < max_epochs; ++e) {
    std::vector<double> cols[6];
    for (const auto& r : records) {
      if (e >= r.rows.size()) continue;
      const auto& row = r.rows[e];
      cols[0].push_back(row.train_loss);
      cols[1].push_back(row.val_loss);
      cols[2].push_back(row.train_acc);
      cols[3].push_back(row.val_acc);
      cols[4].push_back(row.test_acc);
      cols[5].push_back(row.f1_avg);
    }
    agg.epochs.push_back({e + 1, cols[0].size(), mean_std(cols[0]), mean_std(cols[1]),
                          mean_std(cols[2]), mean_std(cols[3]), mean_std(cols[4]), mean_std(cols[5])});
  }
  std::vector<double> acc, f1avg;
  for (const auto& r : records) {
    acc.push_back(r.final_test_acc);
    f1avg.push_back(r.final_f1_avg);
  }
  agg.final_test_acc = mean_std(acc);
  agg.final_f1_avg = mean_std(f1avg);
  const std::size_t tasks = records.front().final_f1.size();
  for (std::size_t t = 0; t < tasks; ++t) {
    std::vector<double> v;
    for (const auto& r : records) {
      if (r.final_f1.size() != tasks) throw ContractError("aggregate_runs: task count differs");
      v.push_back(r.final_f1[t]);
    }
    agg.final_f1.push_back(mean_std(v));
  }
  return agg;
}

}  // namespace qreg
