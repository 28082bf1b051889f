#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "qreg/tensor.hpp"

namespace qreg {

/// Labeled examples. Single-task datasets carry class ids in `labels`;
/// multi-task datasets carry a row-major {0,1} matrix [N x num_tasks] in
/// `task_labels`.
struct Dataset {
  std::string name;
  Tensor features;  // [N x D] or [N x C x H x W]
  bool multitask = false;
  std::size_t num_classes = 0;
  std::size_t num_tasks = 0;
  std::vector<std::int32_t> labels;
  std::vector<std::uint8_t> task_labels;

  std::size_t size() const { return features.rank() ? features.dim(0) : 0; }
  /// Shape of one example.
  Shape example_shape() const;

  Dataset subset(const std::vector<std::size_t>& rows) const;
  /// Loss targets [N x C] one-hot, or [N x T] {0,1} for multi-task.
  Tensor targets(const std::vector<std::size_t>& rows) const;
  /// Throws DataError when an invariant is violated.
  void validate() const;
};

struct NoiseSpec {
  double fraction = 0.0;  // s in [0, 1]
  std::uint64_t seed = 0;
  // Single-task only: draw the new label from the C-1 other classes.
  bool exclude_original = false;
};

struct NoisyDataset {
  Dataset data;
  std::vector<std::size_t> corrupted;  // ascending
};

/// Re-annotates exactly round(s*N) examples chosen uniformly without
/// replacement. Single-task labels are redrawn uniformly over all classes
/// (the new label may equal the old one); multi-task examples get every task
/// bit redrawn as a fair coin.
NoisyDataset inject_noise(const Dataset& ds, const NoiseSpec& spec);

struct Split {
  Dataset train;
  Dataset val;
};

/// Seeded disjoint partition; |val| = round(val_fraction * N), at least 1.
Split split(const Dataset& ds, double val_fraction, std::uint64_t seed);
/// The index sets behind split(): {train rows, val rows}.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double val_fraction, std::uint64_t seed);

/// Gaussian clusters with unit variance. Class means are the vertices of a
/// regular simplex with pairwise distance `separation`, so classes <= dims
/// is required. Rows are grouped by class.
Dataset synth_blobs(std::size_t classes, std::size_t per_class, std::size_t dims,
                    double separation, std::uint64_t seed);

/// Linear multi-task labels over standard Gaussian features: task t is
/// positive iff <w_t, x> exceeds the threshold giving it prior p_t, with
/// hyperplanes w_t and priors p_t in [0.15, 0.5] drawn from `seed`.
/// `sample_seed` draws the examples, so train and test sets from different
/// sample seeds share the same tasks.
Dataset synth_multitask(std::size_t tasks, std::size_t n, std::size_t dims, std::uint64_t seed,
                        std::uint64_t sample_seed);
Dataset synth_multitask(std::size_t tasks, std::size_t n, std::size_t dims, std::uint64_t seed);

/// The per-task positive priors synth_multitask uses for `seed`.
std::vector<double> multitask_priors(std::size_t tasks, std::uint64_t seed);

/// CSV with header `label,f0,...` or, when `tasks > 0`, `y0,...,y{T-1},f0,...`.
/// Single-task class count is max label + 1 unless `classes` is given.
/// Throws ParseError (with line number) or DataError.
Dataset load_csv(const std::filesystem::path& path, std::size_t tasks = 0, std::size_t classes = 0);
void save_csv(const Dataset& ds, const std::filesystem::path& path);

/// Dataset cache in the record container with the QDAT1 magic.
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace qreg
