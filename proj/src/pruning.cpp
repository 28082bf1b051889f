#include "qreg/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qreg/errors.hpp"

namespace qreg {

std::vector<double> neuron_norms(const Tensor& w) {
  if (w.rank() == 0) throw DimensionError("neuron_norms needs at least one output channel");
  const std::size_t f = w.dim(0), per = w.row_size();
  std::vector<double> out(f, 0.0);
  for (std::size_t i = 0; i < f; ++i)
    for (std::size_t j = 0; j < per; ++j) out[i] += std::abs(w[i * per + j]);
  return out;
}

std::vector<std::size_t> select_pruned(const std::vector<double>& norms, double ratio,
                                       PruneCriterion criterion) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ContractError("prune ratio must be in [0, 1)");
  const auto count = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(norms.size())));
  if (count >= norms.size()) throw ContractError("pruning would remove every neuron");
  std::vector<std::size_t> order(norms.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return criterion == PruneCriterion::lowest_norm ? norms[a] < norms[b] : norms[a] > norms[b];
  });
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

namespace {

std::vector<std::size_t> complement(std::size_t n, const std::vector<std::size_t>& removed) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0, r = 0; i < n; ++i) {
    if (r < removed.size() && removed[r] == i) {
      ++r;
    } else {
      keep.push_back(i);
    }
  }
  return keep;
}

Node keep_rows(const Node& n, const std::vector<std::size_t>& keep) {
  return Node::leaf(n.value().gather_rows(keep), n.requires_grad(), n.name());
}

Tensor keep_entries(const Tensor& t, const std::vector<std::size_t>& keep) {
  return t.gather_rows(keep);
}

// Keeps input slices of a weight tensor along dimension 1. `block` is the
// number of consecutive input columns owned by one upstream channel.
Node keep_inputs(const Node& w, const std::vector<std::size_t>& keep, std::size_t block) {
  const Tensor& v = w.value();
  const std::size_t out = v.dim(0);
  const std::size_t in = v.dim(1);
  const std::size_t tail = v.numel() / (out * in);  // kh*kw for conv, 1 for dense
  Shape s = v.shape();
  s[1] = keep.size() * block;
  Tensor r(s);
  std::size_t k = 0;
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t c : keep)
      for (std::size_t b = 0; b < block; ++b)
        for (std::size_t t = 0; t < tail; ++t) r[k++] = v[(o * in + c * block + b) * tail + t];
  return Node::leaf(std::move(r), w.requires_grad(), w.name());
}

}  // namespace

Model prune_model(const Model& model, const PruneSpec& spec) {
  if (!(spec.ratio >= 0.0 && spec.ratio < 1.0)) throw ContractError("prune ratio must be in [0, 1)");
  Model out = model.clone();
  auto& layers = out.layers();
  std::vector<std::size_t> parametric;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].parametric()) parametric.push_back(i);
  }
  if (parametric.size() < 2) return out;

  // Rank every layer on the weights as given, before any input slices go.
  std::vector<std::vector<std::size_t>> removal;
  for (std::size_t p = 0; p + 1 < parametric.size(); ++p) {
    removal.push_back(select_pruned(neuron_norms(layers[parametric[p]].weight.value()), spec.ratio,
                                    spec.criterion));
  }
  const auto shapes = model.layer_output_shapes();

  for (std::size_t p = 0; p + 1 < parametric.size(); ++p) {
    const std::size_t li = parametric[p];
    Layer& layer = layers[li];
    const std::size_t f = layer.channels();
    const auto& removed = removal[p];
    if (removed.empty()) continue;
    const auto keep = complement(f, removed);

    layer.weight = keep_rows(layer.weight, keep);
    layer.bias = keep_rows(layer.bias, keep);

    // Spatial positions per channel once a flatten is crossed.
    std::size_t block = 1;
    for (std::size_t j = li + 1; j < parametric[p + 1]; ++j) {
      Layer& l = layers[j];
      if (l.kind == LayerKind::batchnorm) {
        l.gamma = keep_rows(l.gamma, keep);
        l.beta = keep_rows(l.beta, keep);
        l.running_mean = keep_entries(l.running_mean, keep);
        l.running_var = keep_entries(l.running_var, keep);
      } else if (l.kind == LayerKind::flatten) {
        block = shape_numel(shapes[j - 1]) / f;
      }
    }
    Layer& next = layers[parametric[p + 1]];
    next.weight = keep_inputs(next.weight, keep, block);
  }
  out.validate();
  return out;
}

}  // namespace qreg
