#include "qreg/regularization.hpp"

#include <cmath>
#include <string>

#include "qreg/errors.hpp"

namespace qreg {

Node weight_decay_loss(std::span<const Node> weights, double alpha) {
  if (!(alpha >= 0.0)) throw ContractError("weight decay must be non-negative");
  Node total = Node::constant(Tensor::scalar(0.0));
  for (const auto& w : weights) total = add(total, sum(mul(w, w)));
  return scale(total, alpha);
}

Node dropout_forward(const Node& x, double p, bool train, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ContractError("dropout probability must be in [0, 1)");
  if (!train || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double survivor = 1.0 / (1.0 - p);
  Tensor mask(x.shape());
  for (auto& m : mask.data()) m = keep(rng) ? survivor : 0.0;
  return mul(x, Node::constant(std::move(mask)));
}

Tensor one_hot(std::span<const std::int32_t> labels, std::size_t classes) {
  Tensor out(Shape{labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw DataError("label " + std::to_string(labels[i]) + " outside [0, " +
                      std::to_string(classes) + ")");
    }
    out.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return out;
}

Tensor smooth_labels(const Tensor& y, double alpha, std::size_t classes) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ContractError("label smoothing must be in [0, 1)");
  if (classes < 2) throw ContractError("label smoothing needs at least 2 classes");
  for (double v : y.data()) {
    if (v != 0.0 && v != 1.0) throw ContractError("label smoothing expects {0, 1} targets");
  }
  if (classes > 2) {
    if (y.rank() != 2 || y.dim(1) != classes) {
      throw DimensionError("label smoothing: " + shape_str(y.shape()) + " is not [N x " +
                           std::to_string(classes) + "]");
    }
    for (std::size_t i = 0; i < y.dim(0); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < classes; ++j) s += y.at(i, j);
      if (s != 1.0) throw ContractError("label smoothing: row " + std::to_string(i) + " is not one-hot");
    }
  }
  const double uniform = 1.0 / static_cast<double>(classes);
  Tensor out(y.shape());
  // y + alpha (1/C - y) is the same affine map, written so that the C = 2
  // endpoints land exactly on alpha/2 and 1 - alpha/2.
  for (std::size_t i = 0; i < y.numel(); ++i) out[i] = y[i] + alpha * (uniform - y[i]);
  return out;
}

EarlyStopDecision early_stop_step(EarlyStopState& state, double metric) {
  if (!std::isfinite(metric)) throw ContractError("early stopping metric must be finite");
  ++state.epochs;
  const bool first = state.best_epoch == 0;
  const bool improved = first || (state.metric == StopMetric::val_loss ? metric < state.best
                                                                        : metric > state.best);
  EarlyStopDecision d;
  d.improved = improved;
  if (improved) {
    state.best = metric;
    state.best_epoch = state.epochs;
    state.since_best = 0;
  } else {
    ++state.since_best;
    d.stop = state.since_best >= std::max<std::size_t>(state.patience, 1);
  }
  d.best_epoch = state.best_epoch;
  return d;
}

}  // namespace qreg
