import numpy as np
import pytest

from chandenoise.channel import ChannelParams, pdp_preset
from chandenoise.grid import GridConfig


@pytest.fixture
def small_cfg():
    """Compact grid used across unit tests."""
    return GridConfig(n_subcarriers=32, n_ofdm=14, n_slots_total=3, n_slots_train=1,
                      n_tx=2, n_rx=4)


def make_params(cfg: GridConfig, preset: str = "exp-300ns", doppler_hz: float = 200.0,
                seed: int = 0, sigma_h2: float = 1.0) -> ChannelParams:
    return ChannelParams(pdp=pdp_preset(preset), doppler_hz=doppler_hz,
                         symbol_duration=cfg.symbol_duration, delta_f=cfg.delta_f,
                         sigma_h2=sigma_h2, seed=seed)


def rng_for(*key) -> np.random.Generator:
    return np.random.default_rng(key)
