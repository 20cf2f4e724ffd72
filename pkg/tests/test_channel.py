import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import j0

from chandenoise.channel import (
    ChannelParams,
    NoiseParams,
    apply_channel,
    correlation_coeff,
    doppler_from_velocity,
    generate_channel,
    pdp_preset,
)
from chandenoise.grid import GridConfig, build_grid

from conftest import make_params


def tiny_cfg(**kw):
    base = dict(n_subcarriers=8, n_ofdm=8, n_slots_total=3, n_slots_train=1,
                n_tx=1, n_rx=1, dmrs_symbol_indices=(2, 6))
    base.update(kw)
    return GridConfig(**base)


def test_static_single_tap_is_constant():
    cfg = tiny_cfg()
    params = ChannelParams(pdp=((0.0, 1.0),), doppler_hz=0.0,
                           symbol_duration=cfg.symbol_duration, delta_f=cfg.delta_f, seed=3)
    cfr = generate_channel(cfg, params).cfr
    assert np.max(np.abs(cfr - cfr[0, 0])) < 1e-12


def test_static_multipath_constant_in_time_only():
    cfg = tiny_cfg()
    params = make_params(cfg, preset="two-tap", doppler_hz=0.0, seed=5)
    cfr = generate_channel(cfg, params).cfr
    assert np.max(np.abs(cfr - cfr[:1])) < 1e-12               # flat in time
    assert np.max(np.abs(cfr[0] - cfr[0, 0])) > 1e-3           # selective in freq


def test_element_variance_matches_sigma_h2():
    cfg = tiny_cfg(n_rx=2, n_tx=2)
    total, count = 0.0, 0
    for seed in range(400):
        params = make_params(cfg, doppler_hz=150.0, seed=seed, sigma_h2=1.0)
        cfr = generate_channel(cfg, params).cfr
        total += np.sum(np.abs(cfr) ** 2)
        count += cfr.size
    assert count >= 100_000
    assert abs(total / count - 1.0) < 0.1


def test_empirical_correlation_matches_analytic():
    """Monte Carlo E[H[p,q] conj(H[0,0])] vs the separable closed form."""
    cfg = tiny_cfg()
    params0 = make_params(cfg, preset="exp-300ns", doppler_hz=350.0, seed=0)
    n_real = 10_000
    acc = np.zeros((8, 7), dtype=np.complex128)
    for seed in range(n_real):
        params = ChannelParams(pdp=params0.pdp, doppler_hz=params0.doppler_hz,
                               symbol_duration=params0.symbol_duration,
                               delta_f=params0.delta_f, seed=seed)
        cfr = generate_channel(cfg, params).cfr[:, :, 0, 0]
        acc += cfr[:8, :7] * np.conj(cfr[0, 0])
    emp = acc / n_real
    ps, qs = np.meshgrid(np.arange(8), np.arange(7), indexing="ij")
    analytic = correlation_coeff(ps, qs, params0)
    assert np.max(np.abs(emp - analytic)) < 0.05


def test_apply_channel_noiseless_limit(small_cfg):
    grid = build_grid(small_cfg, np.random.default_rng(0))
    chan = generate_channel(small_cfg, make_params(small_cfg, seed=1))
    y = apply_channel(grid, chan, NoiseParams(sigma2=1e-12, seed=2))
    hx = np.einsum("nkrt,nkt->nkr", chan.cfr, grid.tx_symbols)
    np.testing.assert_allclose(y, hx, atol=1e-5)


def test_apply_channel_noise_power(small_cfg):
    grid = build_grid(small_cfg, np.random.default_rng(0))
    chan = generate_channel(small_cfg, make_params(small_cfg, seed=1))
    grid.tx_symbols[:] = 0.0  # noise-only received signal
    sigma2 = 0.7
    ys = [apply_channel(grid, chan, NoiseParams(sigma2=sigma2, seed=s)) for s in range(30)]
    v = np.concatenate([y.ravel() for y in ys])
    assert v.size >= 100_000
    assert 0.98 * sigma2 <= np.mean(np.abs(v) ** 2) <= 1.02 * sigma2


def test_noise_whiteness(small_cfg):
    grid = build_grid(small_cfg, np.random.default_rng(0))
    grid.tx_symbols[:] = 0.0
    chan = generate_channel(small_cfg, make_params(small_cfg, seed=1))
    y = apply_channel(grid, chan, NoiseParams(sigma2=1.0, seed=9)).ravel()
    assert y.size >= 5_000
    lagged = np.abs(np.mean(y[1:] * np.conj(y[:-1])))
    assert lagged < 0.02


def test_apply_channel_determinism(small_cfg):
    grid = build_grid(small_cfg, np.random.default_rng(0))
    chan = generate_channel(small_cfg, make_params(small_cfg, seed=1))
    noise = NoiseParams(sigma2=0.5, seed=11)
    assert np.array_equal(apply_channel(grid, chan, noise),
                          apply_channel(grid, chan, noise))


def test_apply_channel_shape_mismatch(small_cfg):
    grid = build_grid(small_cfg, np.random.default_rng(0))
    other = tiny_cfg()
    chan = generate_channel(other, make_params(other, seed=1))
    with pytest.raises(ValueError):
        apply_channel(grid, chan, NoiseParams(sigma2=0.5))


def test_correlation_self_and_static():
    cfg = tiny_cfg()
    params = make_params(cfg, doppler_hz=300.0)
    assert correlation_coeff(0, 0, params) == pytest.approx(1.0)
    static = make_params(cfg, doppler_hz=0.0)
    for p in range(10):
        assert abs(correlation_coeff(p, 0, static)) == pytest.approx(1.0)


def test_correlation_separable_closed_form():
    cfg = tiny_cfg()
    params = make_params(cfg, preset="two-tap", doppler_hz=250.0)
    p, q = 3, 2
    expected_t = j0(2 * np.pi * 250.0 * cfg.symbol_duration * p)
    expected_f = sum(w * np.exp(-2j * np.pi * q * cfg.delta_f * d) for d, w in params.pdp)
    assert correlation_coeff(p, q, params) == pytest.approx(expected_t * expected_f)


@settings(deadline=None, max_examples=30)
@given(st.integers(-10, 10), st.integers(-10, 10),
       st.floats(0.0, 600.0), st.sampled_from(["flat", "exp-300ns", "two-tap"]))
def test_correlation_hermitian_and_bounded(p, q, doppler, preset):
    cfg = tiny_cfg()
    params = ChannelParams(pdp=pdp_preset(preset), doppler_hz=doppler,
                           symbol_duration=cfg.symbol_duration, delta_f=cfg.delta_f)
    eps = correlation_coeff(p, q, params)
    assert abs(eps) <= 1.0 + 1e-12
    assert correlation_coeff(-p, -q, params) == pytest.approx(np.conj(eps))


def test_doppler_from_velocity():
    # 120 km/h at 3.5 GHz -> ~389 Hz
    assert doppler_from_velocity(120.0, 3.5e9) == pytest.approx(389.0, abs=1.0)


def test_invalid_params():
    cfg = tiny_cfg()
    with pytest.raises(ValueError):
        ChannelParams(pdp=((0.0, 0.7),), doppler_hz=0.0,
                      symbol_duration=cfg.symbol_duration, delta_f=cfg.delta_f)
    with pytest.raises(ValueError):
        ChannelParams(pdp=((0.0, 0.5), (0.0, 0.5)), doppler_hz=0.0,
                      symbol_duration=cfg.symbol_duration, delta_f=cfg.delta_f)
    with pytest.raises(ValueError):
        NoiseParams(sigma2=0.0)
