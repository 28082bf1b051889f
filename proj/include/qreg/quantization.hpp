#pragma once

#include <span>
#include <vector>

#include "qreg/autodiff.hpp"
#include "qreg/tensor.hpp"

namespace qreg {

/// Scales below this are clamped so dead channels never divide by zero.
inline constexpr double kMinScale = 1e-8;

/// Bit widths for fake quantization. "W4/A8" means weight_bits=4, act_bits=8.
struct QuantConfig {
  int weight_bits = 4;
  int act_bits = 4;
  int boundary_bits = 8;  // first and last parametric layers
  double ema_momentum = 0.99;
  bool enabled = true;

  /// Throws ContractError unless every bit width is in [2, 16] and the
  /// momentum is in (0, 1).
  void validate() const;
};

/// Scale parameters tracked by one quantized layer.
struct QuantState {
  std::vector<double> weight_scale;  // one per output channel, recomputed every forward
  double act_scale = 1.0;            // EMA of per-batch max |x|
  bool calibrated = false;
};

/// Largest grid index for `bits`: 2^(bits-1) - 1.
int quant_levels(int bits);

/// Quantize-dequantize: clamp(round(x*q/scale), -q, q) * scale / q with ties
/// rounded away from zero. `scale` holds one value (per-tensor) or one per
/// slice along dimension 0 (per-channel). Throws ContractError for a
/// non-positive scale or a length mismatch.
Tensor fake_quantize(const Tensor& x, int bits, std::span<const double> scale);
Tensor fake_quantize(const Tensor& x, int bits, double scale);

/// max |W| over each output channel (slice along dimension 0), clamped to kMinScale.
std::vector<double> weight_scales(const Tensor& w);

/// Tracks the activation range: the first batch calibrates, later batches
/// update an exponential moving average. Only called in train mode.
QuantState act_scale_update(QuantState state, const Tensor& batch, double momentum);

/// fake_quantize as a graph node whose backward is the identity
/// (straight-through estimator). Scales are constants of the graph.
Node fake_quantize_ste(const Node& x, int bits, std::vector<double> scale);

}  // namespace qreg
