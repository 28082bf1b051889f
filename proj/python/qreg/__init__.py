"""Python bindings for the qreg experiment library."""

from ._qreg import (
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    check_config,
    fake_quantize,
    fingerprint,
    inject_noise,
    quant_levels,
    run,
    smooth_labels,
    synth_blobs,
    weight_scales,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DomainError",
    "check_config",
    "fake_quantize",
    "fingerprint",
    "inject_noise",
    "quant_levels",
    "run",
    "smooth_labels",
    "synth_blobs",
    "weight_scales",
]
