#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "qreg/autodiff.hpp"

namespace qreg {

/// alpha * sum over tensors of the squared entries.
Node weight_decay_loss(std::span<const Node> weights, double alpha);

/// Inverted dropout. In train mode each entry is zeroed with probability p and
/// survivors are scaled by 1/(1-p); in eval mode returns x itself.
/// Throws ContractError unless 0 <= p < 1.
Node dropout_forward(const Node& x, double p, bool train, std::mt19937_64& rng);

/// One-hot encoding of class ids into [N x classes].
Tensor one_hot(std::span<const std::int32_t> labels, std::size_t classes);

/// Label smoothing y -> (1 - alpha) y + alpha / classes, applied entry-wise.
///
/// With classes > 2, every row of `y` must be one-hot over `classes` columns.
/// With classes == 2, `y` may be any {0,1} matrix: each entry is treated as an
/// independent two-class label (presence/absence), so 1 -> 1 - alpha/2 and
/// 0 -> alpha/2. Throws ContractError for alpha outside [0, 1) or invalid labels.
Tensor smooth_labels(const Tensor& y, double alpha, std::size_t classes);

enum class StopMetric { val_loss, val_accuracy };

struct EarlyStopState {
  std::size_t patience = 5;
  StopMetric metric = StopMetric::val_loss;
  double best = 0.0;
  std::size_t best_epoch = 0;  // 1-based, 0 before the first step
  std::size_t epochs = 0;
  std::size_t since_best = 0;
};

struct EarlyStopDecision {
  bool stop = false;
  bool improved = false;
  std::size_t best_epoch = 0;
};

/// Feeds one epoch's validation metric. Loss is minimized, accuracy
/// maximized. Stops once `patience` consecutive epochs fail to improve
/// (patience 0 behaves like 1). Throws ContractError for a non-finite metric.
EarlyStopDecision early_stop_step(EarlyStopState& state, double metric);

}  // namespace qreg
