#include "qreg/quantization.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "qreg/errors.hpp"

namespace qreg {

namespace {
void check_bits(int bits, const char* what) {
  if (bits < 2 || bits > 16) {
    throw ContractError(std::string(what) + " must be in [2, 16], got " + std::to_string(bits));
  }
}
}  // namespace

void QuantConfig::validate() const {
  check_bits(weight_bits, "weight_bits");
  check_bits(act_bits, "act_bits");
  check_bits(boundary_bits, "boundary_bits");
  if (!(ema_momentum > 0.0 && ema_momentum < 1.0)) {
    throw ContractError("ema_momentum must be in (0, 1)");
  }
}

int quant_levels(int bits) {
  check_bits(bits, "bits");
  return (1 << (bits - 1)) - 1;
}

Tensor fake_quantize(const Tensor& x, int bits, std::span<const double> scale) {
  const double q = quant_levels(bits);
  std::size_t channels = 1;
  if (scale.size() != 1) {
    if (x.rank() == 0 || scale.size() != x.dim(0)) {
      throw ContractError("fake_quantize: " + std::to_string(scale.size()) +
                          " scales for tensor " + shape_str(x.shape()));
    }
    channels = scale.size();
  }
  for (double s : scale) {
    if (!(s > 0.0)) throw ContractError("fake_quantize: scale must be positive");
  }
  Tensor out(x.shape());
  const std::size_t per = x.numel() / channels;
  for (std::size_t c = 0; c < channels; ++c) {
    const double s = scale[c];
    for (std::size_t i = c * per; i < (c + 1) * per; ++i) {
      // std::round rounds half away from zero, which keeps the grid odd-symmetric.
      const double level = std::clamp(std::round(x[i] * q / s), -q, q);
      out[i] = level * s / q;
    }
  }
  return out;
}

Tensor fake_quantize(const Tensor& x, int bits, double scale) {
  return fake_quantize(x, bits, std::span<const double>(&scale, 1));
}

std::vector<double> weight_scales(const Tensor& w) {
  const std::size_t channels = w.rank() == 0 ? 1 : w.dim(0);
  const std::size_t per = w.numel() / channels;
  std::vector<double> out(channels, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    double m = 0.0;
    for (std::size_t i = c * per; i < (c + 1) * per; ++i) m = std::max(m, std::abs(w[i]));
    out[c] = std::max(m, kMinScale);
  }
  return out;
}

QuantState act_scale_update(QuantState state, const Tensor& batch, double momentum) {
  double m = 0.0;
  for (double v : batch.data()) m = std::max(m, std::abs(v));
  m = std::max(m, kMinScale);
  if (!state.calibrated) {
    state.act_scale = m;
    state.calibrated = true;
  } else {
    state.act_scale = std::max(momentum * state.act_scale + (1.0 - momentum) * m, kMinScale);
  }
  return state;
}

Node fake_quantize_ste(const Node& x, int bits, std::vector<double> scale) {
  return custom_grad(x, [bits, s = std::move(scale)](const Tensor& v) {
    return fake_quantize(v, bits, s);
  });
}

}  // namespace qreg
