"""MIMO-OFDM link simulation with online adaptive channel denoising."""

from chandenoise.grid import GridConfig, ResourceGrid, build_grid, qam_demodulate_hard, qam_modulate
from chandenoise.channel import (
    ChannelParams,
    ChannelRealization,
    NoiseParams,
    apply_channel,
    correlation_coeff,
    generate_channel,
    pdp_preset,
)

__all__ = [
    "GridConfig",
    "ResourceGrid",
    "build_grid",
    "qam_modulate",
    "qam_demodulate_hard",
    "ChannelParams",
    "ChannelRealization",
    "NoiseParams",
    "generate_channel",
    "apply_channel",
    "correlation_coeff",
    "pdp_preset",
]
