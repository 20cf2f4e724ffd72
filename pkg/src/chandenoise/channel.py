"""Time-varying frequency-selective MIMO channel generation.

Each antenna pair carries L independent tap processes a_l[n] with Jakes-type
Doppler autocorrelation and per-path power from the PDP; the frequency
response at symbol n, subcarrier k is

    H[n, k] = sum_l a_l[n] * exp(-j 2 pi k delta_f tau_l).

The same PDP/Doppler parameters feed the analytic correlation coefficient
used by the window optimizer, so generator and optimizer share one model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import j0

from chandenoise.grid import GridConfig, ResourceGrid

SPEED_OF_LIGHT = 299_792_458.0

# Oscillators per tap in the sum-of-sinusoids Doppler process. 16+ makes the
# taps near-Gaussian and their ensemble autocorrelation J0(2 pi fD tau).
N_OSCILLATORS = 24


@dataclass(frozen=True)
class ChannelParams:
    """Tapped-delay-line parameters for one propagation scenario."""

    pdp: tuple[tuple[float, float], ...]  # (delay seconds, power) pairs, powers sum to 1
    doppler_hz: float
    symbol_duration: float
    delta_f: float
    sigma_h2: float = 1.0
    seed: int = 0

    def __post_init__(self):
        delays = [d for d, _ in self.pdp]
        powers = [p for _, p in self.pdp]
        if abs(sum(powers) - 1.0) > 1e-9:
            raise ValueError(f"path powers must sum to 1 (got {sum(powers)})")
        if any(d < 0 for d in delays) or any(np.diff(delays) <= 0) and len(delays) > 1:
            raise ValueError("path delays must be non-negative and strictly increasing")
        if self.doppler_hz < 0:
            raise ValueError("doppler_hz must be >= 0")

    @property
    def n_paths(self) -> int:
        return len(self.pdp)

    @property
    def delays(self) -> np.ndarray:
        return np.array([d for d, _ in self.pdp])

    @property
    def powers(self) -> np.ndarray:
        return np.array([p for _, p in self.pdp])


@dataclass
class ChannelRealization:
    """CFR tensor for every RE: shape (n_symbols, K, n_rx, n_tx)."""

    cfr: np.ndarray
    params: ChannelParams


@dataclass(frozen=True)
class NoiseParams:
    sigma2: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be > 0")


def doppler_from_velocity(velocity_kmh: float, carrier_hz: float) -> float:
    """Maximum Doppler shift fD = v * fc / c."""
    return (velocity_kmh / 3.6) * carrier_hz / SPEED_OF_LIGHT


def pdp_preset(name: str) -> tuple[tuple[float, float], ...]:
    """Named power-delay profiles usable in experiment configs.

    flat       -- single zero-delay tap (frequency-flat channel)
    exp-300ns  -- 12-tap exponential profile, ~300 ns rms delay spread
    two-tap    -- equal-power taps at 0 and 500 ns (strong selectivity)
    """
    if name == "flat":
        return ((0.0, 1.0),)
    if name == "exp-300ns":
        delays = np.arange(12) * 100e-9
        powers = np.exp(-delays / 300e-9)
        powers /= powers.sum()
        return tuple(zip(delays.tolist(), powers.tolist()))
    if name == "two-tap":
        return ((0.0, 0.5), (500e-9, 0.5))
    raise ValueError(f"unknown PDP preset {name!r}")


def _tap_processes(params: ChannelParams, n_sym: int, n_rx: int, n_tx: int) -> np.ndarray:
    """Sum-of-sinusoids tap gains, shape (L, n_sym, n_rx, n_tx).

    a(t) = sqrt(p/N) sum_m exp(j(2 pi fD cos(alpha_m) t + phi_m)) with alpha_m,
    phi_m iid uniform, so E[a(t) a*(t+tau)] = p * J0(2 pi fD tau) over
    realizations and E|a|^2 = p for any fD (including fD = 0).
    """
    rng = np.random.default_rng(params.seed)
    L = params.n_paths
    shape = (L, n_rx, n_tx, N_OSCILLATORS)
    alpha = rng.uniform(0.0, 2.0 * np.pi, size=shape)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=shape)
    t = np.arange(n_sym) * params.symbol_duration
    # phase[l, r, t, m, n] = 2 pi fD cos(alpha) t_n + phi
    omega = 2.0 * np.pi * params.doppler_hz * np.cos(alpha)
    phase = omega[..., None] * t + phi[..., None]
    taps = np.exp(1j * phase).sum(axis=3) / np.sqrt(N_OSCILLATORS)
    taps *= np.sqrt(params.powers)[:, None, None, None]
    return np.moveaxis(taps, 3, 1)  # (L, n_sym, n_rx, n_tx)


def generate_channel(cfg: GridConfig, params: ChannelParams) -> ChannelRealization:
    """Generate the CFR tensor for every RE of the configured grid."""
    n_sym, k = cfg.n_symbols_total, cfg.n_subcarriers
    taps = _tap_processes(params, n_sym, cfg.n_rx, cfg.n_tx)
    # steering[l, k] = exp(-j 2 pi k delta_f tau_l)
    steering = np.exp(-2j * np.pi * np.outer(params.delays, np.arange(k)) * cfg.delta_f)
    cfr = np.einsum("lnrt,lk->nkrt", taps, steering, optimize=True)
    cfr *= np.sqrt(params.sigma_h2)
    return ChannelRealization(cfr=cfr, params=params)


def apply_channel(grid: ResourceGrid, chan: ChannelRealization, noise: NoiseParams) -> np.ndarray:
    """Received tensor y[n, k] = H[n, k] x[n, k] + v[n, k], shape (n_sym, K, n_rx)."""
    if chan.cfr.shape[:2] != grid.tx_symbols.shape[:2] or chan.cfr.shape[3] != grid.tx_symbols.shape[2]:
        raise ValueError(f"shape mismatch: cfr {chan.cfr.shape} vs tx {grid.tx_symbols.shape}")
    y = np.einsum("nkrt,nkt->nkr", chan.cfr, grid.tx_symbols, optimize=True)
    rng = np.random.default_rng(noise.seed)
    scale = np.sqrt(noise.sigma2 / 2.0)
    v = scale * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return y + v


def correlation_coeff(p: int | np.ndarray, q: int | np.ndarray, params: ChannelParams) -> complex | np.ndarray:
    """Correlation eps_{p,q} between CFRs p symbols and q subcarriers apart.

    Separable: J0(2 pi fD T p) * sum_l p_l exp(-j 2 pi q delta_f tau_l).
    Satisfies eps_{0,0} = 1, |eps| <= 1 and eps_{-p,-q} = conj(eps_{p,q}).
    """
    p = np.asarray(p)
    q = np.asarray(q)
    time_corr = j0(2.0 * np.pi * params.doppler_hz * params.symbol_duration * p)
    freq_corr = np.tensordot(
        params.powers,
        np.exp(-2j * np.pi * np.multiply.outer(params.delays, q * params.delta_f)),
        axes=(0, 0),
    )
    out = time_corr * freq_corr
    return complex(out) if out.ndim == 0 else out
