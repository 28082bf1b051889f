#include "qreg/qat.hpp"

#include "qreg/errors.hpp"

namespace qreg {

Node quantize_layer_forward(Layer& layer, const Node& x, const QuantConfig& cfg, bool train,
                            std::vector<std::pair<Node, Node>>* trace) {
  if (!layer.parametric()) {
    throw ContractError(std::string("cannot quantize a ") + to_string(layer.kind) + " layer");
  }
  auto plain = [&](const Node& in, const Node& w) {
    return layer.kind == LayerKind::dense
               ? linear(in, w, &layer.bias)
               : add_channel_bias(conv2d(in, w, layer.stride, layer.padding), layer.bias);
  };
  if (!cfg.enabled || !layer.quant) return plain(x, layer.weight);

  LayerQuant& lq = *layer.quant;
  if (train) lq.state = act_scale_update(std::move(lq.state), x.value(), cfg.ema_momentum);
  lq.state.weight_scale = weight_scales(layer.weight.value());

  // Before the first training batch the default scale of 1 is used, so
  // eval-mode outputs stay a pure function of the stored state.
  const double act_scale = lq.state.act_scale;
  Node xq = fake_quantize_ste(x, lq.act_bits, {act_scale});
  Node wq = fake_quantize_ste(layer.weight, lq.weight_bits, lq.state.weight_scale);
  if (trace) {
    trace->emplace_back(x, xq);
    trace->emplace_back(layer.weight, wq);
  }
  return plain(xq, wq);
}

Model wrap_model(Model model, const QuantConfig& cfg) {
  cfg.validate();
  auto& layers = model.layers();
  std::vector<std::size_t> parametric;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].parametric()) parametric.push_back(i);
  }
  if (parametric.empty()) throw ContractError("wrap_model: model has no parametric layer");
  for (std::size_t i : parametric) {
    const bool boundary = i == parametric.front() || i == parametric.back();
    LayerQuant lq;
    lq.weight_bits = boundary ? cfg.boundary_bits : cfg.weight_bits;
    lq.act_bits = boundary ? cfg.boundary_bits : cfg.act_bits;
    layers[i].quant = lq;
  }
  model.quant_config() = cfg;
  return model;
}

}  // namespace qreg
