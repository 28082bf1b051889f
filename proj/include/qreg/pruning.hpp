#pragma once

#include <cstddef>
#include <vector>

#include "qreg/nn.hpp"

namespace qreg {

enum class PruneCriterion { lowest_norm, highest_norm };

struct PruneSpec {
  double ratio = 0.75;  // fraction of neurons removed per prunable layer, in [0, 1)
  std::size_t warmup_epochs = 0;
  PruneCriterion criterion = PruneCriterion::lowest_norm;
};

/// L1 norm of each output neuron's weight slice (dimension 0).
std::vector<double> neuron_norms(const Tensor& w);

/// Indices (ascending) of the floor(ratio * norms.size()) neurons to remove.
/// Ties are broken by lower index.
std::vector<std::size_t> select_pruned(const std::vector<double>& norms, double ratio,
                                       PruneCriterion criterion = PruneCriterion::lowest_norm);

/// Structured pruning of every hidden dense layer and conv layer. Removed
/// neurons take their bias, their batchnorm channel and the matching input
/// slice of the next parametric layer with them. The last parametric layer
/// (the head) is never pruned. Returns a new model; `model` is unchanged.
/// Throws ContractError for a ratio outside [0, 1).
Model prune_model(const Model& model, const PruneSpec& spec);

}  // namespace qreg
