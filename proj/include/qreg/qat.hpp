#pragma once

#include "qreg/nn.hpp"
#include "qreg/quantization.hpp"

namespace qreg {

/// Quantized forward of a dense or conv layer:
///   f(fake_quantize(x; act_bits, act_scale), fake_quantize(W; weight_bits, weight_scale(W)))
/// plus the unquantized bias. Both fake-quantize vertices are straight-through.
/// In train mode the activation scale is updated from the pre-quantization
/// input first; in eval mode the stored scale is used unchanged.
/// With `cfg.enabled == false` this is the plain layer forward.
Node quantize_layer_forward(Layer& layer, const Node& x, const QuantConfig& cfg, bool train,
                            std::vector<std::pair<Node, Node>>* trace = nullptr);

/// Attaches fake quantization to every parametric layer: (weight_bits,
/// act_bits) for inner layers and (boundary_bits, boundary_bits) for the
/// first parametric layer and the last one (the head).
Model wrap_model(Model model, const QuantConfig& cfg);

}  // namespace qreg
