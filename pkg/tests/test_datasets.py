import numpy as np
import pytest

from chandenoise.channel import NoiseParams, apply_channel, generate_channel
from chandenoise.data_aided import WindowSize
from chandenoise.datasets import (
    Dataset,
    MapSpec,
    OfflineDistribution,
    build_offline_dataset,
    build_online_dataset,
    channels_to_complex,
    complex_to_channels,
    lattice_axes,
    lattice_windows,
    load_dataset,
    make_meta_tasks,
    save_dataset,
    snr_db_to_sigma2,
    subsample_grid,
)
from chandenoise.estimation import CfrEstimateMap, detect_grid, interpolate_2d, ls_pilot_estimate
from chandenoise.grid import GridConfig, build_grid

from conftest import make_params


def small_grid_cfg(**kw):
    base = dict(n_subcarriers=32, n_ofdm=14, n_slots_total=3, n_slots_train=1,
                n_tx=2, n_rx=2)
    base.update(kw)
    return GridConfig(**base)


def online_inputs(cfg, snr_db, seed=0, doppler=200.0, preset="exp-300ns",
                  perfect=False):
    sigma2 = snr_db_to_sigma2(snr_db, cfg.n_tx)
    grid = build_grid(cfg, np.random.default_rng(seed))
    chan = generate_channel(cfg, make_params(cfg, seed=seed + 1, doppler_hz=doppler,
                                             preset=preset))
    y = apply_channel(grid, chan, NoiseParams(sigma2=sigma2, seed=seed + 2))
    pilot = ls_pilot_estimate(y, grid)
    full = np.full_like(chan.cfr, np.nan)
    det = None
    for slot in range(cfg.n_slots_total):
        rows = np.arange(slot * cfg.n_ofdm, (slot + 1) * cfg.n_ofdm)
        interp = interpolate_2d(pilot, grid, rows=rows)
        full[rows] = interp.est[rows]
        det = detect_grid(y, interp, grid, sigma2, rows=rows, into=det)
    if perfect:
        det.hard_symbols[grid.data_mask] = grid.tx_symbols[grid.data_mask]
        det.app[:] = 1.0
    return grid, chan, y, CfrEstimateMap(est=full, provenance="interpolated"), det, sigma2


def test_subsample_degenerate_stride_covers_grid():
    spec = MapSpec(m_f=4, m_t=4, stride_f=1, stride_t=1)
    centers = subsample_grid(6, 5, spec)
    assert len(centers) == 30
    assert centers[0] == (0, 0) and centers[-1] == (5, 4)


def test_subsample_paper_scale_arithmetic():
    # 512 subcarriers at stride 8 -> 64 lattice points; one 58-point window fits
    spec = MapSpec(m_f=58, m_t=8, stride_f=8, stride_t=1)
    times, freqs = lattice_axes(14, 512, spec)
    assert freqs.size == 64
    windows = list(lattice_windows(times, freqs, spec))
    assert len(windows) == 1  # floor(64/58) * floor(14/8)
    assert subsample_grid(14, 512, spec) == subsample_grid(14, 512, spec)


def test_subsample_window_must_fit():
    with pytest.raises(ValueError):
        subsample_grid(6, 6, MapSpec(m_f=8, m_t=3, stride_f=1, stride_t=1))


def test_channel_roundtrip_encoding():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((5, 3)) + 1j * rng.standard_normal((5, 3))
    np.testing.assert_allclose(channels_to_complex(complex_to_channels(m)), m,
                               rtol=1e-6)


class TestOnlineDataset:
    spec = MapSpec(m_f=8, m_t=7, stride_f=2, stride_t=2)

    def test_zero_train_slots_rejected(self):
        cfg = small_grid_cfg()
        grid, chan, y, noisy_map, det, sigma2 = online_inputs(cfg, snr_db=0)
        with pytest.raises(ValueError):
            build_online_dataset(y, grid, det, noisy_map, WindowSize(2, 2), self.spec,
                                 n_train_slots=0)

    def test_noiseless_static_targets_equal_truth(self):
        cfg = small_grid_cfg()
        grid, chan, y, noisy_map, det, _ = online_inputs(cfg, snr_db=200, doppler=0.0,
                                                         preset="flat", perfect=True)
        ds, quality = build_online_dataset(y, grid, det, noisy_map, WindowSize(2, 2),
                                           self.spec, n_train_slots=2, chan=chan)
        assert len(ds) > 0
        # the float64 data-aided estimates match the truth to 1e-8 per entry
        assert np.all(np.sqrt(quality.target_nmse) < 1e-8)
        for s in ds.samples:
            target_c = channels_to_complex(s.target) * s.scale
            n0, k0 = s.center
            # stored maps are float32: last lattice point vs the true CFR there
            r, t = s.antenna_pair
            assert abs(target_c[-1, -1] - chan.cfr[n0, k0, r, t]) < 1e-5

    def test_labels_beat_inputs_at_0db(self):
        cfg = small_grid_cfg(n_rx=4)
        grid, chan, y, noisy_map, det, _ = online_inputs(cfg, snr_db=0, seed=5)
        ds, quality = build_online_dataset(y, grid, det, noisy_map, WindowSize(2, 3),
                                           self.spec, n_train_slots=2, chan=chan)
        assert quality.mean_target_nmse_db < quality.mean_input_nmse_db

    def test_true_target_variant(self):
        cfg = small_grid_cfg()
        grid, chan, y, noisy_map, det, _ = online_inputs(cfg, snr_db=6)
        ds, _ = build_online_dataset(y, grid, det, noisy_map, WindowSize(1, 1),
                                     self.spec, n_train_slots=2, chan=chan,
                                     use_true_targets=True)
        assert all(s.target_kind == "true" for s in ds.samples)

    def test_sample_geometry(self):
        cfg = small_grid_cfg()
        grid, chan, y, noisy_map, det, _ = online_inputs(cfg, snr_db=6)
        ds, _ = build_online_dataset(y, grid, det, noisy_map, WindowSize(1, 1),
                                     self.spec, n_train_slots=2)
        # lattice: 14 time points (28 symbols / 2), 16 freq points -> 2x2 windows
        n_windows = 2 * 2
        assert len(ds) == n_windows * cfg.n_rx * cfg.n_tx
        assert ds.samples[0].noisy.shape == (2, 8, 7)
        assert ds.samples[0].noisy.dtype == np.float32


class TestOfflineDataset:
    def make_dist(self, snrs=(0.0,), preset="exp-300ns"):
        cfg = small_grid_cfg()
        spec = MapSpec(m_f=8, m_t=7, stride_f=2, stride_t=2)
        return OfflineDistribution(
            grid=cfg, spec=spec,
            channel_templates=(make_params(cfg, preset=preset, doppler_hz=200.0),),
            snrs_db=snrs)

    def test_requested_count_and_kind(self):
        ds = build_offline_dataset(self.make_dist(), 10, np.random.default_rng(0))
        assert len(ds) == 10
        assert all(s.target_kind == "true" for s in ds.samples)
        assert ds.kind == "offline"

    def test_seeded_determinism(self):
        a = build_offline_dataset(self.make_dist(), 12, np.random.default_rng(3))
        b = build_offline_dataset(self.make_dist(), 12, np.random.default_rng(3))
        for sa, sb in zip(a.samples, b.samples):
            np.testing.assert_array_equal(sa.noisy, sb.noisy)
            np.testing.assert_array_equal(sa.target, sb.target)

    def test_input_quality_improves_with_snr(self):
        def mean_nmse(snr_db):
            ds = build_offline_dataset(self.make_dist(snrs=(snr_db,)), 64,
                                       np.random.default_rng(1))
            errs = []
            for s in ds.samples:
                noisy = channels_to_complex(s.noisy)
                true = channels_to_complex(s.target)
                errs.append(np.sum(np.abs(noisy - true) ** 2)
                            / max(np.sum(np.abs(true) ** 2), 1e-30))
            return np.mean(errs)

        assert mean_nmse(9.0) < mean_nmse(0.0) < mean_nmse(-6.0)


def test_meta_tasks_split_sizes():
    cfg = small_grid_cfg(n_rx=2, n_tx=1)
    spec = MapSpec(m_f=8, m_t=7, stride_f=2, stride_t=2)
    dist = OfflineDistribution(grid=cfg, spec=spec,
                               channel_templates=(make_params(cfg, doppler_hz=100.0),
                                                  make_params(cfg, preset="two-tap",
                                                              doppler_hz=300.0)),
                               snrs_db=(0.0, 6.0))
    tasks = make_meta_tasks(dist, n_tasks=2, n_sup=16, n_que=32,
                            rng=np.random.default_rng(0))
    assert len(tasks) == 2
    for task in tasks:
        assert len(task.support) == 16 and task.support.kind == "support"
        assert len(task.query) == 32 and task.query.kind == "query"


def test_dataset_file_roundtrip(tmp_path):
    cfg = small_grid_cfg()
    spec = MapSpec(m_f=8, m_t=7, stride_f=2, stride_t=2)
    dist = OfflineDistribution(grid=cfg, spec=spec,
                               channel_templates=(make_params(cfg, doppler_hz=50.0),),
                               snrs_db=(3.0,))
    ds = build_offline_dataset(dist, 9, np.random.default_rng(7))
    path = tmp_path / "offline.scfr"
    manifest = save_dataset(ds, path)
    assert manifest.exists()
    assert sum(1 for _ in open(manifest)) == 10  # header + 9 rows
    back = load_dataset(path)
    assert back.kind == "offline" and len(back) == 9
    for a, b in zip(ds.samples, back.samples):
        np.testing.assert_array_equal(a.noisy, b.noisy)
        np.testing.assert_array_equal(a.target, b.target)
        assert a.antenna_pair == b.antenna_pair
        assert a.center == b.center
        assert a.target_kind == b.target_kind
        assert b.scale == pytest.approx(a.scale, rel=1e-6)


def test_save_rerun_identical_digest(tmp_path):
    import hashlib
    cfg = small_grid_cfg()
    spec = MapSpec(m_f=8, m_t=7, stride_f=2, stride_t=2)
    dist = OfflineDistribution(grid=cfg, spec=spec,
                               channel_templates=(make_params(cfg, doppler_hz=50.0),),
                               snrs_db=(3.0,))
    digests = []
    for run in range(2):
        ds = build_offline_dataset(dist, 6, np.random.default_rng(11))
        p = tmp_path / f"run{run}.scfr"
        save_dataset(ds, p)
        digests.append(hashlib.sha256(p.read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_snr_conversion():
    assert snr_db_to_sigma2(0.0, n_tx=2) == pytest.approx(2.0)
    assert snr_db_to_sigma2(9.0, n_tx=2) == pytest.approx(2.0 / 10 ** 0.9)
