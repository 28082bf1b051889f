#include "qreg/data.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "qreg/errors.hpp"
#include "qreg/nn.hpp"

namespace qreg {

Shape Dataset::example_shape() const {
  return Shape(features.shape().begin() + 1, features.shape().end());
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  Dataset out;
  out.name = name;
  out.multitask = multitask;
  out.num_classes = num_classes;
  out.num_tasks = num_tasks;
  out.features = features.gather_rows(rows);
  if (multitask) {
    out.task_labels.reserve(rows.size() * num_tasks);
    for (auto r : rows) {
      out.task_labels.insert(out.task_labels.end(), task_labels.begin() + r * num_tasks,
                             task_labels.begin() + (r + 1) * num_tasks);
    }
  } else {
    out.labels.reserve(rows.size());
    for (auto r : rows) out.labels.push_back(labels[r]);
  }
  return out;
}

Tensor Dataset::targets(const std::vector<std::size_t>& rows) const {
  if (multitask) {
    Tensor t(Shape{rows.size(), num_tasks});
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t k = 0; k < num_tasks; ++k) t.at(i, k) = task_labels[rows[i] * num_tasks + k];
    return t;
  }
  Tensor t(Shape{rows.size(), num_classes});
  for (std::size_t i = 0; i < rows.size(); ++i) t.at(i, static_cast<std::size_t>(labels[rows[i]])) = 1.0;
  return t;
}

void Dataset::validate() const {
  const std::size_t n = size();
  if (n == 0) throw DataError(name + ": empty dataset");
  if (!features.all_finite()) throw DataError(name + ": non-finite feature");
  if (multitask) {
    if (num_tasks == 0 || task_labels.size() != n * num_tasks) {
      throw DataError(name + ": task label matrix does not match " + std::to_string(n) + " rows");
    }
    for (auto v : task_labels) {
      if (v > 1) throw DataError(name + ": task label outside {0, 1}");
    }
  } else {
    if (labels.size() != n) throw DataError(name + ": label count does not match features");
    for (auto l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
        throw DataError(name + ": label " + std::to_string(l) + " outside [0, " +
                        std::to_string(num_classes) + ")");
      }
    }
  }
}

// ---------------------------------------------------------------------------

NoisyDataset inject_noise(const Dataset& ds, const NoiseSpec& spec) {
  if (!(spec.fraction >= 0.0 && spec.fraction <= 1.0)) {
    throw ContractError("noise fraction must be in [0, 1]");
  }
  if (!ds.multitask && ds.num_classes < 2) throw ContractError("noise needs at least 2 classes");
  if (ds.multitask && ds.num_tasks < 1) throw ContractError("noise needs at least 1 task");

  NoisyDataset out{ds, {}};
  const std::size_t n = ds.size();
  const auto k = static_cast<std::size_t>(std::llround(spec.fraction * static_cast<double>(n)));
  if (k == 0) return out;

  std::mt19937_64 rng(spec.seed);
  // Partial Fisher-Yates: the first k slots are a uniform sample without replacement.
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());

  if (ds.multitask) {
    std::bernoulli_distribution coin(0.5);
    for (auto r : idx)
      for (std::size_t t = 0; t < ds.num_tasks; ++t) out.data.task_labels[r * ds.num_tasks + t] = coin(rng);
  } else {
    const auto c = static_cast<std::int32_t>(ds.num_classes);
    for (auto r : idx) {
      if (spec.exclude_original) {
        std::uniform_int_distribution<std::int32_t> draw(0, c - 2);
        const std::int32_t v = draw(rng);
        out.data.labels[r] = v >= ds.labels[r] ? v + 1 : v;
      } else {
        std::uniform_int_distribution<std::int32_t> draw(0, c - 1);
        out.data.labels[r] = draw(rng);
      }
    }
  }
  out.corrupted = std::move(idx);
  return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ContractError("val_fraction must be in (0, 1)");
  }
  if (n < 2) throw ContractError("cannot split fewer than 2 examples");
  std::size_t nv = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  nv = std::clamp<std::size_t>(nv, 1, n - 1);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> val(perm.begin(), perm.begin() + nv);
  std::vector<std::size_t> train(perm.begin() + nv, perm.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {std::move(train), std::move(val)};
}

Split split(const Dataset& ds, double val_fraction, std::uint64_t seed) {
  auto [tr, va] = split_indices(ds.size(), val_fraction, seed);
  Split s{ds.subset(tr), ds.subset(va)};
  s.train.name = ds.name + "/train";
  s.val.name = ds.name + "/val";
  return s;
}

Dataset synth_blobs(std::size_t classes, std::size_t per_class, std::size_t dims,
                    double separation, std::uint64_t seed) {
  if (classes < 2 || dims < 2) throw ContractError("synth_blobs needs classes >= 2 and dims >= 2");
  if (classes > dims) throw ContractError("synth_blobs places class means on axes: classes <= dims");
  if (per_class == 0) throw ContractError("synth_blobs needs per_class >= 1");
  const double offset = separation / std::sqrt(2.0);
  Dataset ds;
  ds.name = "blobs";
  ds.num_classes = classes;
  ds.features = Tensor(Shape{classes * per_class, dims});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t row = c * per_class + i;
      for (std::size_t d = 0; d < dims; ++d) {
        ds.features.at(row, d) = noise(rng) + (d == c ? offset : 0.0);
      }
      ds.labels.push_back(static_cast<std::int32_t>(c));
    }
  return ds;
}

std::vector<double> multitask_priors(std::size_t tasks, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> prior(0.15, 0.5);
  std::vector<double> p(tasks);
  for (auto& v : p) v = prior(rng);
  return p;
}

Dataset synth_multitask(std::size_t tasks, std::size_t n, std::size_t dims, std::uint64_t seed,
                        std::uint64_t sample_seed) {
  if (tasks < 2) throw ContractError("synth_multitask needs at least 2 tasks");
  if (n == 0 || dims == 0) throw ContractError("synth_multitask needs n >= 1 and dims >= 1");
  const auto priors = multitask_priors(tasks, seed);
  std::mt19937_64 task_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> planes(tasks * dims);
  std::vector<double> thresholds(tasks);
  const boost::math::normal standard;
  for (std::size_t t = 0; t < tasks; ++t) {
    double norm = 0.0;
    for (std::size_t d = 0; d < dims; ++d) {
      const double v = gauss(task_rng);
      planes[t * dims + d] = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t d = 0; d < dims; ++d) planes[t * dims + d] /= norm;
    thresholds[t] = boost::math::quantile(standard, 1.0 - priors[t]);
  }

  Dataset ds;
  ds.name = "multitask";
  ds.multitask = true;
  ds.num_tasks = tasks;
  ds.features = Tensor(Shape{n, dims});
  ds.task_labels.resize(n * tasks);
  std::mt19937_64 rng(sample_seed);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < dims; ++d) ds.features.at(i, d) = gauss(rng);
    for (std::size_t t = 0; t < tasks; ++t) {
      double dot = 0.0;
      for (std::size_t d = 0; d < dims; ++d) dot += planes[t * dims + d] * ds.features.at(i, d);
      ds.task_labels[i * tasks + t] = dot > thresholds[t] ? 1 : 0;
    }
  }
  return ds;
}

Dataset synth_multitask(std::size_t tasks, std::size_t n, std::size_t dims, std::uint64_t seed) {
  return synth_multitask(tasks, n, dims, seed, seed + 1);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

double parse_number(std::string_view tok, std::size_t line, const std::string& path) {
  tok = trim(tok);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(v)) {
    throw ParseError(path + ":" + std::to_string(line) + ": not a finite number: '" +
                         std::string(tok) + "'",
                     line);
  }
  return v;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, std::size_t tasks, std::size_t classes) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string(), 0);
  const std::string p = path.string();
  std::string line;
  if (!std::getline(in, line)) throw ParseError(p + ": missing header", 1);
  const auto header = split_commas(trim(line));
  const std::size_t label_cols = tasks > 0 ? tasks : 1;
  if (header.size() <= label_cols) throw ParseError(p + ":1: header has no feature columns", 1);
  for (std::size_t i = 0; i < header.size(); ++i) {
    const std::string want = i < label_cols
                                 ? (tasks > 0 ? "y" + std::to_string(i) : std::string("label"))
                                 : "f" + std::to_string(i - label_cols);
    if (trim(header[i]) != want) {
      throw ParseError(p + ":1: expected column '" + want + "', found '" +
                           std::string(trim(header[i])) + "'",
                       1);
    }
  }
  const std::size_t dims = header.size() - label_cols;

  Dataset ds;
  ds.name = path.stem().string();
  ds.multitask = tasks > 0;
  ds.num_tasks = tasks;
  std::vector<double> feats;
  std::size_t lineno = 1;
  std::int32_t max_label = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cols = split_commas(trim(line));
    if (cols.size() != header.size()) {
      throw ParseError(p + ":" + std::to_string(lineno) + ": expected " +
                           std::to_string(header.size()) + " fields, found " +
                           std::to_string(cols.size()),
                       lineno);
    }
    for (std::size_t i = 0; i < label_cols; ++i) {
      const double v = parse_number(cols[i], lineno, p);
      if (v != std::floor(v) || v < 0 || (ds.multitask && v > 1)) {
        throw DataError(p + ":" + std::to_string(lineno) + ": label out of range");
      }
      if (ds.multitask) {
        ds.task_labels.push_back(static_cast<std::uint8_t>(v));
      } else {
        if (classes > 0 && v >= static_cast<double>(classes)) {
          throw DataError(p + ":" + std::to_string(lineno) + ": label " + std::string(trim(cols[i])) +
                          " outside [0, " + std::to_string(classes) + ")");
        }
        ds.labels.push_back(static_cast<std::int32_t>(v));
        max_label = std::max(max_label, ds.labels.back());
      }
    }
    for (std::size_t i = label_cols; i < cols.size(); ++i) feats.push_back(parse_number(cols[i], lineno, p));
  }
  const std::size_t n = feats.size() / dims;
  if (n == 0) throw DataError(p + ": no data rows");
  ds.features = Tensor(Shape{n, dims}, std::move(feats));
  if (!ds.multitask) ds.num_classes = classes > 0 ? classes : static_cast<std::size_t>(max_label) + 1;
  if (!ds.multitask && ds.num_classes < 2) ds.num_classes = 2;
  ds.validate();
  return ds;
}

void save_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::size_t n = ds.size();
  const std::size_t dims = ds.features.row_size();
  if (ds.multitask) {
    for (std::size_t t = 0; t < ds.num_tasks; ++t) out << "y" << t << ',';
  } else {
    out << "label,";
  }
  for (std::size_t d = 0; d < dims; ++d) out << 'f' << d << (d + 1 < dims ? "," : "\n");
  char buf[32];
  for (std::size_t i = 0; i < n; ++i) {
    if (ds.multitask) {
      for (std::size_t t = 0; t < ds.num_tasks; ++t) out << int(ds.task_labels[i * ds.num_tasks + t]) << ',';
    } else {
      out << ds.labels[i] << ',';
    }
    for (std::size_t d = 0; d < dims; ++d) {
      std::snprintf(buf, sizeof buf, "%.17g", ds.features[i * dims + d]);
      out << buf << (d + 1 < dims ? "," : "\n");
    }
  }
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::vector<Record> records;
  records.push_back({"meta", Tensor(Shape{3}, {ds.multitask ? 1.0 : 0.0,
                                              static_cast<double>(ds.num_classes),
                                              static_cast<double>(ds.num_tasks)})});
  records.push_back({"features", ds.features});
  std::vector<double> labels;
  if (ds.multitask) {
    labels.assign(ds.task_labels.begin(), ds.task_labels.end());
    records.push_back({"labels", Tensor(Shape{ds.size(), ds.num_tasks}, std::move(labels))});
  } else {
    labels.assign(ds.labels.begin(), ds.labels.end());
    records.push_back({"labels", Tensor(Shape{ds.size()}, std::move(labels))});
  }
  write_records(path, kDatasetMagic, records);
}

Dataset load_dataset(const std::filesystem::path& path) {
  auto records = read_records(path, kDatasetMagic);
  if (records.size() != 3 || records[0].name != "meta" || records[1].name != "features" ||
      records[2].name != "labels") {
    throw DataError(path.string() + ": not a dataset cache");
  }
  Dataset ds;
  ds.name = path.stem().string();
  ds.multitask = records[0].value[0] != 0.0;
  ds.num_classes = static_cast<std::size_t>(records[0].value[1]);
  ds.num_tasks = static_cast<std::size_t>(records[0].value[2]);
  ds.features = std::move(records[1].value);
  for (double v : records[2].value.data()) {
    if (ds.multitask) {
      ds.task_labels.push_back(static_cast<std::uint8_t>(v));
    } else {
      ds.labels.push_back(static_cast<std::int32_t>(v));
    }
  }
  ds.validate();
  return ds;
}

}  // namespace qreg
