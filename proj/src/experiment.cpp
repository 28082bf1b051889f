#include "qreg/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "qreg/errors.hpp"

namespace qreg {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

double to_double(const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_uint(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

template <typename T, typename F>
std::vector<T> to_list(const std::string& v, F convert) {
  std::vector<T> out;
  for (const auto& tok : split_list(v)) out.push_back(convert(tok));
  return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"data.preset", [](auto& c, auto& v) {
         if (v != "blobs" && v != "multitask" && v != "csv") throw ConfigError("unknown data preset '" + v + "'");
         c.data_preset = v;
       }},
      {"data.classes", [](auto& c, auto& v) { c.classes = to_uint(v); }},
      {"data.features", [](auto& c, auto& v) { c.features = to_uint(v); }},
      {"data.tasks", [](auto& c, auto& v) { c.tasks = to_uint(v); }},
      {"data.train_size", [](auto& c, auto& v) { c.train_size = to_uint(v); }},
      {"data.test_size", [](auto& c, auto& v) { c.test_size = to_uint(v); }},
      {"data.separation", [](auto& c, auto& v) { c.separation = to_double(v); }},
      {"data.val_fraction", [](auto& c, auto& v) { c.val_fraction = to_double(v); }},
      {"data.data_seed", [](auto& c, auto& v) { c.data_seed = to_uint(v); }},
      {"data.train_csv", [](auto& c, auto& v) { c.train_csv = v; }},
      {"data.test_csv", [](auto& c, auto& v) { c.test_csv = v; }},
      {"data.image_shape", [](auto& c, auto& v) { c.image_shape = to_list<std::size_t>(v, to_uint); }},
      {"data.noise_exclude_original", [](auto& c, auto& v) { c.noise_exclude_original = to_bool(v); }},

      {"model.preset", [](auto& c, auto& v) {
         if (v != "mlp-small" && v != "mlp" && v != "cnn-small") throw ConfigError("unknown model preset '" + v + "'");
         c.model_preset = v;
       }},
      {"model.hidden", [](auto& c, auto& v) { c.hidden = to_list<std::size_t>(v, to_uint); }},
      {"model.hidden_batchnorm", [](auto& c, auto& v) { c.hidden_batchnorm = to_bool(v); }},
      {"model.dropout_layers", [](auto& c, auto& v) { c.dropout_layers = to_list<std::size_t>(v, to_uint); }},
      {"model.task_norm", [](auto& c, auto& v) { c.task_norm = to_bool(v); }},

      {"train.epochs", [](auto& c, auto& v) { c.epochs = to_uint(v); }},
      {"train.batch_size", [](auto& c, auto& v) { c.batch_size = to_uint(v); }},
      {"train.lr", [](auto& c, auto& v) { c.lr = to_double(v); }},
      {"train.beta1", [](auto& c, auto& v) { c.beta1 = to_double(v); }},
      {"train.beta2", [](auto& c, auto& v) { c.beta2 = to_double(v); }},
      {"train.adam_eps", [](auto& c, auto& v) { c.adam_eps = to_double(v); }},
      {"train.early_stopping", [](auto& c, auto& v) { c.early_stopping = to_bool(v); }},

      {"regularization.mode", [](auto& c, auto& v) { c.mode = parse_mode(v); }},
      {"regularization.weight_decay", [](auto& c, auto& v) { c.weight_decay = to_double(v); }},
      {"regularization.dropout_p", [](auto& c, auto& v) { c.dropout_p = to_double(v); }},
      {"regularization.label_smoothing", [](auto& c, auto& v) { c.label_smoothing = to_double(v); }},
      {"regularization.early_stop_patience", [](auto& c, auto& v) { c.early_stop_patience = to_uint(v); }},
      {"regularization.early_stop_metric", [](auto& c, auto& v) {
         if (v == "val_loss") c.early_stop_metric = StopMetric::val_loss;
         else if (v == "val_accuracy") c.early_stop_metric = StopMetric::val_accuracy;
         else throw ConfigError("early_stop_metric must be val_loss or val_accuracy");
       }},

      {"quantization.weight_bits", [](auto& c, auto& v) { c.quant.weight_bits = static_cast<int>(to_uint(v)); }},
      {"quantization.act_bits", [](auto& c, auto& v) { c.quant.act_bits = static_cast<int>(to_uint(v)); }},
      {"quantization.boundary_bits", [](auto& c, auto& v) { c.quant.boundary_bits = static_cast<int>(to_uint(v)); }},
      {"quantization.ema_momentum", [](auto& c, auto& v) { c.quant.ema_momentum = to_double(v); }},
      {"quantization.enabled", [](auto& c, auto& v) { c.quant.enabled = to_bool(v); }},
      {"quantization.keep_batchnorm", [](auto& c, auto& v) { c.keep_batchnorm = to_bool(v); }},

      {"pruning.prune_ratio", [](auto& c, auto& v) { c.prune_ratio = to_double(v); }},
      {"pruning.prune_warmup_epochs", [](auto& c, auto& v) { c.prune_warmup_epochs = to_uint(v); }},
      {"pruning.prune_criterion", [](auto& c, auto& v) {
         if (v == "lowest") c.prune_criterion = PruneCriterion::lowest_norm;
         else if (v == "highest") c.prune_criterion = PruneCriterion::highest_norm;
         else throw ConfigError("prune_criterion must be lowest or highest");
       }},

      {"experiment.modes", [](auto& c, auto& v) { c.modes = to_list<Mode>(v, parse_mode); }},
      {"experiment.noise", [](auto& c, auto& v) { c.noise = to_list<double>(v, to_double); }},
      {"experiment.seeds", [](auto& c, auto& v) { c.seeds = to_list<std::uint64_t>(v, to_uint); }},
      {"experiment.stability_mode", [](auto& c, auto& v) { c.stability_mode = parse_mode(v); }},
      {"experiment.grid", [](auto& c, auto& v) { c.grid = to_list<double>(v, to_double); }},
      {"experiment.reference", [](auto& c, auto& v) { c.reference = to_double(v); }},
      {"experiment.output_dir", [](auto& c, auto& v) { c.output_dir = v; }},
  };
  return table;
}

}  // namespace

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("invalid value for '" + key + "': " + why);
  };
  if (data_preset == "blobs") {
    if (classes < 2) fail("data.classes", "need at least 2 classes");
    if (features < classes) fail("data.features", "blobs need features >= classes");
    if (train_size < classes || test_size < classes) fail("data.train_size", "fewer examples than classes");
    if (separation < 0.0) fail("data.separation", "must be non-negative");
  } else if (data_preset == "multitask") {
    if (tasks < 2) fail("data.tasks", "need at least 2 tasks");
    if (features < 1) fail("data.features", "must be positive");
    if (train_size < 4 || test_size < 1) fail("data.train_size", "too small");
  } else if (train_csv.empty() || test_csv.empty()) {
    fail("data.train_csv", "csv preset needs train_csv and test_csv");
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) fail("data.val_fraction", "must be in (0, 1)");
  if (model_preset == "cnn-small" && data_preset != "csv") {
    fail("model.preset", "cnn-small needs image data (csv preset with image_shape)");
  }
  if (model_preset == "cnn-small" && image_shape.size() != 3) fail("data.image_shape", "cnn-small needs C,H,W");
  if (model_preset == "mlp" && hidden.empty()) fail("model.hidden", "needs at least one hidden layer");
  if (epochs == 0) fail("train.epochs", "must be positive");
  if (batch_size < 2) fail("train.batch_size", "must be at least 2");
  if (!(lr >= 0.0)) fail("train.lr", "must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("train.beta1", "must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("train.beta2", "must be in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("regularization.weight_decay", "must be non-negative");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("regularization.dropout_p", "must be in [0, 1)");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) fail("regularization.label_smoothing", "must be in [0, 1)");
  try {
    quant.validate();
  } catch (const ContractError& e) {
    fail("quantization", e.what());
  }
  if (!(prune_ratio >= 0.0 && prune_ratio < 1.0)) fail("pruning.prune_ratio", "must be in [0, 1)");
  if (modes.empty()) fail("experiment.modes", "empty");
  if (noise.empty()) fail("experiment.noise", "empty");
  for (double s : noise) {
    if (!(s >= 0.0 && s <= 1.0)) fail("experiment.noise", "values must be in [0, 1]");
  }
  if (seeds.empty()) fail("experiment.seeds", "empty");
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (body.front() == '[') {
      if (body.back() != ']') throw ConfigError(where + "malformed section header '" + body + "'");
      section = trim(std::string_view(body).substr(1, body.size() - 2));
      static const char* known[] = {"data", "model", "train", "regularization", "quantization", "pruning", "experiment"};
      if (std::find(std::begin(known), std::end(known), section) == std::end(known)) {
        throw ConfigError(where + "unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + body + "'");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (section.empty()) throw ConfigError(where + "key '" + key + "' outside any section");
    const std::string full = section + "." + key;
    const auto it = setters().find(full);
    if (it == setters().end()) throw ConfigError(where + "unknown key '" + key + "' in [" + section + "]");
    if (seen.count(full)) {
      throw ConfigError(where + "duplicate key '" + full + "' (first set on line " + std::to_string(seen[full]) + ")");
    }
    seen[full] = lineno;
    try {
      it->second(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + "key '" + full + "': " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

namespace {

std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>) {
      out += exact(v[i]);
    } else {
      out += std::to_string(v[i]);
    }
  }
  return out;
}

// Applies a stability-sweep hyper-parameter to the job's effective config.
ExperimentConfig effective(const ExperimentConfig& cfg, const JobSpec& job) {
  ExperimentConfig c = cfg;
  c.mode = job.mode;
  if (job.force_early_stopping) c.early_stopping = true;
  if (job.hyper) {
    switch (job.mode) {
      case Mode::quantization:
        c.quant.weight_bits = c.quant.act_bits = static_cast<int>(std::lround(*job.hyper));
        break;
      case Mode::pruning: c.prune_ratio = *job.hyper; break;
      case Mode::dropout: c.dropout_p = *job.hyper; break;
      case Mode::weight_decay: c.weight_decay = *job.hyper; break;
      case Mode::label_smoothing: c.label_smoothing = *job.hyper; break;
      default: throw ConfigError(std::string("mode ") + to_string(job.mode) + " has no sweepable hyper-parameter");
    }
  }
  return c;
}

// A header starting with y0,y1,... marks multi-task CSV; "label" marks single-label.
std::size_t csv_label_columns(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::string line;
  if (!in || !std::getline(in, line)) return 0;
  std::size_t tasks = 0;
  for (const auto& col : split_list(line)) {
    if (col != "y" + std::to_string(tasks)) break;
    ++tasks;
  }
  return tasks;
}

std::size_t warmup_epochs(const ExperimentConfig& c) {
  return c.prune_warmup_epochs ? *c.prune_warmup_epochs : c.epochs / 4;
}

}  // namespace

std::string canonical_job_text(const ExperimentConfig& cfg, const JobSpec& job) {
  const ExperimentConfig c = effective(cfg, job);
  std::map<std::string, std::string> kv;
  kv["data.preset"] = c.data_preset;
  if (c.data_preset == "blobs") {
    kv["data.classes"] = std::to_string(c.classes);
    kv["data.separation"] = exact(c.separation);
  }
  if (c.data_preset == "multitask") kv["data.tasks"] = std::to_string(c.tasks);
  if (c.data_preset != "csv") {
    kv["data.features"] = std::to_string(c.features);
    kv["data.train_size"] = std::to_string(c.train_size);
    kv["data.test_size"] = std::to_string(c.test_size);
  } else {
    kv["data.train_csv"] = c.train_csv;
    kv["data.test_csv"] = c.test_csv;
    kv["data.image_shape"] = join(c.image_shape);
  }
  kv["data.val_fraction"] = exact(c.val_fraction);
  kv["data.data_seed"] = std::to_string(c.data_seed);
  kv["data.noise_exclude_original"] = c.noise_exclude_original ? "true" : "false";
  kv["data.noise"] = exact(job.noise);
  kv["model.preset"] = c.model_preset;
  if (c.model_preset == "mlp") kv["model.hidden"] = join(c.hidden);
  kv["model.hidden_batchnorm"] = c.hidden_batchnorm ? "true" : "false";
  kv["model.dropout_layers"] = join(c.dropout_layers);
  kv["model.task_norm"] = c.task_norm ? (*c.task_norm ? "true" : "false") : "default";
  kv["train.epochs"] = std::to_string(c.epochs);
  kv["train.batch_size"] = std::to_string(c.batch_size);
  kv["train.lr"] = exact(c.lr);
  kv["train.beta1"] = exact(c.beta1);
  kv["train.beta2"] = exact(c.beta2);
  kv["train.adam_eps"] = exact(c.adam_eps);
  kv["train.early_stopping"] = c.early_stopping ? "true" : "false";
  kv["regularization.mode"] = to_string(c.mode);
  // Only the active regularizer's knobs change a run's result.
  switch (c.mode) {
    case Mode::weight_decay: kv["regularization.weight_decay"] = exact(c.weight_decay); break;
    case Mode::dropout: kv["regularization.dropout_p"] = exact(c.dropout_p); break;
    case Mode::label_smoothing: kv["regularization.label_smoothing"] = exact(c.label_smoothing); break;
    case Mode::quantization:
      kv["quantization.weight_bits"] = std::to_string(c.quant.weight_bits);
      kv["quantization.act_bits"] = std::to_string(c.quant.act_bits);
      kv["quantization.boundary_bits"] = std::to_string(c.quant.boundary_bits);
      kv["quantization.ema_momentum"] = exact(c.quant.ema_momentum);
      kv["quantization.enabled"] = c.quant.enabled ? "true" : "false";
      kv["quantization.keep_batchnorm"] = c.keep_batchnorm ? "true" : "false";
      break;
    case Mode::pruning:
      kv["pruning.prune_ratio"] = exact(c.prune_ratio);
      kv["pruning.prune_warmup_epochs"] = std::to_string(warmup_epochs(c));
      kv["pruning.prune_criterion"] = c.prune_criterion == PruneCriterion::lowest_norm ? "lowest" : "highest";
      break;
    default:
      break;
  }
  if (c.mode == Mode::early_stopping || c.early_stopping) {
    kv["regularization.early_stop_patience"] = std::to_string(c.early_stop_patience);
    kv["regularization.early_stop_metric"] =
        c.early_stop_metric == StopMetric::val_loss ? "val_loss" : "val_accuracy";
  }
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::string fingerprint(const ExperimentConfig& cfg, const JobSpec& job) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical_job_text(cfg, job)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

JobData make_job_data(const ExperimentConfig& cfg, const JobSpec& job) {
  Dataset pool, test;
  if (cfg.data_preset == "blobs") {
    pool = synth_blobs(cfg.classes, cfg.train_size / cfg.classes, cfg.features, cfg.separation, cfg.data_seed);
    test = synth_blobs(cfg.classes, cfg.test_size / cfg.classes, cfg.features, cfg.separation, cfg.data_seed + 1);
  } else if (cfg.data_preset == "multitask") {
    pool = synth_multitask(cfg.tasks, cfg.train_size, cfg.features, cfg.data_seed, cfg.data_seed + 1);
    test = synth_multitask(cfg.tasks, cfg.test_size, cfg.features, cfg.data_seed, cfg.data_seed + 2);
  } else {
    const std::size_t tasks = csv_label_columns(cfg.train_csv);
    pool = load_csv(cfg.train_csv, tasks);
    test = load_csv(cfg.test_csv, tasks, pool.num_classes);
    if (!cfg.image_shape.empty()) {
      Shape img(cfg.image_shape.begin(), cfg.image_shape.end());
      Shape ps{pool.size()}, ts{test.size()};
      ps.insert(ps.end(), img.begin(), img.end());
      ts.insert(ts.end(), img.begin(), img.end());
      pool.features = pool.features.reshaped(ps);
      test.features = test.features.reshaped(ts);
    }
  }
  test.name += "/test";
  auto parts = split(pool, cfg.val_fraction, cfg.data_seed);
  NoisyDataset noisy = inject_noise(parts.train, {job.noise, job.seed, cfg.noise_exclude_original});
  return {std::move(noisy.data), std::move(parts.val), std::move(test), std::move(noisy.corrupted)};
}

Model make_job_model(const ExperimentConfig& cfg, const Dataset& train, std::uint64_t seed) {
  const HeadKind head = train.multitask ? HeadKind::sigmoid : HeadKind::softmax;
  const std::size_t outputs = train.multitask ? train.num_tasks : train.num_classes;
  const bool task_norm = cfg.task_norm.value_or(train.multitask);
  // Dropout layers are always present; train() activates them only in dropout mode.
  const double drop_placeholder = 0.5;
  if (cfg.model_preset == "cnn-small") {
    return make_cnn_small(train.example_shape(), outputs, head, seed, drop_placeholder, task_norm);
  }
  MlpOptions opts;
  if (cfg.model_preset == "mlp") opts.hidden = cfg.hidden;
  opts.hidden_batchnorm = cfg.hidden_batchnorm;
  opts.dropout_p = drop_placeholder;
  opts.dropout_layers = cfg.dropout_layers;
  opts.task_norm = task_norm;
  return make_mlp(train.features.row_size(), outputs, head, opts, seed);
}

TrainConfig make_train_config(const ExperimentConfig& cfg, const JobSpec& job) {
  const ExperimentConfig c = effective(cfg, job);
  TrainConfig t;
  t.mode = c.mode;
  t.epochs = c.epochs;
  t.batch_size = c.batch_size;
  t.adam = {c.lr, c.beta1, c.beta2, c.adam_eps};
  t.seed = job.seed;
  t.weight_decay = c.weight_decay;
  t.dropout_p = c.dropout_p;
  t.label_smoothing = c.label_smoothing;
  t.early_stop_patience = c.early_stop_patience;
  t.early_stop_metric = c.early_stop_metric;
  t.early_stopping = c.early_stopping;
  t.quant = c.quant;
  t.keep_batchnorm = c.keep_batchnorm;
  t.prune = {c.prune_ratio, warmup_epochs(c), c.prune_criterion};
  t.fingerprint = fingerprint(cfg, job);
  return t;
}

JobOutcome run_job(const ExperimentConfig& cfg, const JobSpec& job) {
  JobOutcome out;
  out.job = job;
  try {
    const TrainConfig tc = make_train_config(cfg, job);
    JobData data = make_job_data(cfg, job);
    out.model = make_job_model(cfg, data.train, job.seed);
    out.result = train(out.model, data.train, data.val, data.test, tc);
    out.ok = true;
  } catch (const DivergenceError& e) {
    out.error = e.what();
    out.result.record = e.partial;
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

std::size_t thread_budget() {
  if (const char* env = std::getenv("QREG_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<JobOutcome> run_jobs(const ExperimentConfig& cfg, const std::vector<JobSpec>& jobs,
                                 std::size_t threads) {
  std::vector<JobOutcome> out(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) out[i] = run_job(cfg, jobs[i]);
  };
  const std::size_t n = std::min(std::max<std::size_t>(threads, 1), jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct Loaded {
  ExperimentConfig cfg;
  std::filesystem::path out;
};

Loaded load(const CommandOptions& opts) {
  Loaded l{load_config(opts.config), {}};
  if (opts.seeds) {
    if (opts.seeds->empty()) throw ConfigError("--seeds: empty list");
    l.cfg.seeds = *opts.seeds;
  }
  l.out = opts.out ? *opts.out : std::filesystem::path(l.cfg.output_dir);
  std::filesystem::create_directories(l.out);
  return l;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

std::string run_name(const JobOutcome& o) {
  return "run_" + o.result.record.fingerprint + "_" + std::to_string(o.job.seed);
}

// Writes every successful run's CSV; failures are listed in failures.txt.
bool write_runs(const std::filesystem::path& dir, const std::vector<JobOutcome>& outcomes,
                std::ostream& err) {
  std::string failures;
  for (const auto& o : outcomes) {
    if (o.ok) {
      write_file(dir / (run_name(o) + ".csv"), run_record_csv(o.result.record));
    } else {
      failures += std::string(to_string(o.job.mode)) + " s=" + format_number(o.job.noise) +
                  " seed=" + std::to_string(o.job.seed) + ": " + o.error + "\n";
      err << "job failed: " << to_string(o.job.mode) << " s=" << format_number(o.job.noise)
          << " seed=" << o.job.seed << ": " << o.error << "\n";
    }
  }
  if (!failures.empty()) write_file(dir / "failures.txt", failures);
  return failures.empty();
}

template <typename F>
int guarded(std::ostream& err, F body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
}

double mean_acc(const std::vector<JobOutcome>& outcomes, Mode mode, double s,
                std::optional<double> hyper, MeanStd* stats = nullptr) {
  std::vector<double> v;
  for (const auto& o : outcomes) {
    if (o.ok && o.job.mode == mode && o.job.noise == s && o.job.hyper == hyper) {
      v.push_back(o.result.record.final_test_acc);
    }
  }
  const MeanStd ms = mean_std(v);
  if (stats) *stats = ms;
  return v.empty() ? std::nan("") : ms.mean;
}

std::string hyper_label(Mode mode, double h) {
  if (mode == Mode::quantization) {
    const long b = std::lround(h);
    return "W" + std::to_string(b) + "/A" + std::to_string(b);
  }
  return format_number(h);
}

}  // namespace

int cmd_train(const CommandOptions& opts, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    auto [cfg, dir] = load(opts);
    if (cfg.noise.size() != 1) throw ConfigError("train runs one noise level; experiment.noise lists " + std::to_string(cfg.noise.size()));
    std::vector<JobSpec> jobs;
    for (auto seed : cfg.seeds) jobs.push_back({cfg.mode, cfg.noise.front(), seed, std::nullopt, false});
    const auto outcomes = run_jobs(cfg, jobs, thread_budget());
    bool ok = write_runs(dir, outcomes, err);
    for (const auto& o : outcomes) {
      if (!o.ok) continue;
      save_checkpoint(o.model, dir / (run_name(o) + ".ckpt"));
      if (!opts.quiet) {
        log << run_name(o) << ": mode=" << to_string(o.job.mode) << " s=" << format_number(o.job.noise)
            << " epochs=" << o.result.record.rows.size()
            << " final_test_acc=" << format_number(o.result.record.final_test_acc);
        if (o.result.record.num_tasks) log << " f1_avg=" << format_number(o.result.record.final_f1_avg);
        log << "\n";
      }
    }
    return ok ? 0 : 3;
  });
}

int cmd_noise_sweep(const CommandOptions& opts, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    auto [cfg, dir] = load(opts);
    if (std::find(cfg.modes.begin(), cfg.modes.end(), Mode::none) == cfg.modes.end()) {
      throw ConfigError("experiment.modes must include 'none' as the baseline for gains");
    }
    std::vector<JobSpec> jobs;
    for (Mode m : cfg.modes)
      for (double s : cfg.noise)
        for (auto seed : cfg.seeds) jobs.push_back({m, s, seed, std::nullopt, false});
    const auto outcomes = run_jobs(cfg, jobs, thread_budget());
    const bool ok = write_runs(dir, outcomes, err);

    std::string sweep = "mode,s,seed,final_test_acc\n";
    for (const auto& o : outcomes) {
      if (!o.ok) continue;
      sweep += std::string(to_string(o.job.mode)) + "," + format_number(o.job.noise) + "," +
               std::to_string(o.job.seed) + "," + format_number(o.result.record.final_test_acc) + "\n";
    }
    write_file(dir / "sweep.csv", sweep);

    std::string mean = "mode,s,mean_acc,std_acc,gain_vs_baseline\n";
    for (Mode m : cfg.modes)
      for (double s : cfg.noise) {
        MeanStd ms;
        const double acc = mean_acc(outcomes, m, s, std::nullopt, &ms);
        const double base = mean_acc(outcomes, Mode::none, s, std::nullopt);
        const double gain = m == Mode::none ? 0.0 : acc - base;
        mean += std::string(to_string(m)) + "," + format_number(s) + "," + format_number(acc) + "," +
                format_number(ms.std) + "," + format_number(gain) + "\n";
        if (!opts.quiet) {
          log << to_string(m) << " s=" << format_number(s) << " acc=" << format_number(acc)
              << " gain=" << format_number(gain) << "\n";
        }
      }
    write_file(dir / "sweep_mean.csv", mean);
    return ok ? 0 : 3;
  });
}

int cmd_stability_sweep(const CommandOptions& opts, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    auto [cfg, dir] = load(opts);
    if (!cfg.stability_mode) throw ConfigError("experiment.stability_mode is required");
    if (cfg.grid.empty()) throw ConfigError("experiment.grid is empty");
    const Mode mode = *cfg.stability_mode;
    const double ref = cfg.reference.value_or(cfg.grid.front());
    std::vector<double> values = cfg.grid;
    if (std::find(values.begin(), values.end(), ref) == values.end()) values.push_back(ref);
    // Validate every grid point up front so a bad value is a config error.
    for (double h : values) {
      JobSpec probe{mode, 0.0, cfg.seeds.front(), h, false};
      make_train_config(cfg, probe).validate();
    }

    std::vector<JobSpec> jobs;
    for (double h : values)
      for (double s : cfg.noise)
        for (auto seed : cfg.seeds) jobs.push_back({mode, s, seed, h, false});
    const auto outcomes = run_jobs(cfg, jobs, thread_budget());
    const bool ok = write_runs(dir, outcomes, err);

    std::string runs = "mode,hyper,s,seed,final_test_acc\n";
    for (const auto& o : outcomes) {
      if (!o.ok) continue;
      runs += std::string(to_string(mode)) + "," + hyper_label(mode, *o.job.hyper) + "," +
              format_number(o.job.noise) + "," + std::to_string(o.job.seed) + "," +
              format_number(o.result.record.final_test_acc) + "\n";
    }
    write_file(dir / "stability_runs.csv", runs);

    std::string table = "mode,hyper,s,gain_vs_reference\n";
    std::string spread = "mode,s,spread\n";
    for (double s : cfg.noise) {
      const double base = mean_acc(outcomes, mode, s, ref);
      double lo = INFINITY, hi = -INFINITY;
      for (double h : cfg.grid) {
        const double gain = h == ref ? 0.0 : mean_acc(outcomes, mode, s, h) - base;
        lo = std::min(lo, gain);
        hi = std::max(hi, gain);
        table += std::string(to_string(mode)) + "," + hyper_label(mode, h) + "," + format_number(s) +
                 "," + format_number(gain) + "\n";
      }
      spread += std::string(to_string(mode)) + "," + format_number(s) + "," + format_number(hi - lo) + "\n";
      if (!opts.quiet) log << to_string(mode) << " s=" << format_number(s) << " spread=" << format_number(hi - lo) << "\n";
    }
    write_file(dir / "stability.csv", table);
    write_file(dir / "stability_spread.csv", spread);
    return ok ? 0 : 3;
  });
}

int cmd_multitask(const CommandOptions& opts, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    auto [cfg, dir] = load(opts);
    if (cfg.data_preset == "blobs") throw ConfigError("data.preset must be multi-task for the multitask command");
    std::vector<JobSpec> jobs;
    for (Mode m : cfg.modes)
      for (double s : cfg.noise)
        for (auto seed : cfg.seeds) jobs.push_back({m, s, seed, std::nullopt, true});
    const auto outcomes = run_jobs(cfg, jobs, thread_budget());
    const bool ok = write_runs(dir, outcomes, err);

    std::size_t tasks = 0;
    for (const auto& o : outcomes) {
      if (o.ok) tasks = o.result.record.num_tasks;
    }
    if (tasks == 0) throw std::runtime_error("no multi-task run succeeded");
    std::string f1_cols;
    for (std::size_t t = 0; t < tasks; ++t) f1_cols += ",f1_t" + std::to_string(t);
    f1_cols += ",f1_avg";

    std::string runs = "mode,s,seed" + f1_cols + "\n";
    for (const auto& o : outcomes) {
      if (!o.ok) continue;
      runs += std::string(to_string(o.job.mode)) + "," + format_number(o.job.noise) + "," + std::to_string(o.job.seed);
      for (double v : o.result.record.final_f1) runs += "," + format_number(v);
      runs += "," + format_number(o.result.record.final_f1_avg) + "\n";
    }
    write_file(dir / "multitask_runs.csv", runs);

    std::string table = "mode,s" + f1_cols + "\n";
    for (Mode m : cfg.modes)
      for (double s : cfg.noise) {
        std::vector<RunRecord> recs;
        for (const auto& o : outcomes) {
          if (o.ok && o.job.mode == m && o.job.noise == s) recs.push_back(o.result.record);
        }
        if (recs.empty()) continue;
        const RunAggregate agg = aggregate_runs(recs);
        table += std::string(to_string(m)) + "," + format_number(s);
        for (const auto& f : agg.final_f1) table += "," + format_number(f.mean);
        table += "," + format_number(agg.final_f1_avg.mean) + "\n";
        if (!opts.quiet) {
          log << to_string(m) << " s=" << format_number(s) << " f1_avg=" << format_number(agg.final_f1_avg.mean) << "\n";
        }
      }
    write_file(dir / "multitask.csv", table);
    return ok ? 0 : 3;
  });
}

std::vector<std::map<std::string, std::string>> read_table(const std::filesystem::path& path,
                                                           const std::vector<std::string>& header) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string(), 0);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty", 1);
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) cols.push_back(tok);
  }
  if (cols != header) throw ParseError(path.string() + ": unexpected header '" + line + "'", 1);
  std::vector<std::map<std::string, std::string>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::vector<std::string> vals;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) vals.push_back(tok);
    if (vals.size() != header.size()) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": wrong field count", lineno);
    }
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size(); ++i) row[header[i]] = vals[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace qreg
