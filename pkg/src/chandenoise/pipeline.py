"""End-to-end receiver runs: fine-tuning phase, inference phase, metrics.

One trial = one channel/noise realization pushed through the configured
method. The training phase (first n_slots_train slots) performs pilot
estimation and detection, picks the data-aided window size analytically,
builds the online dataset and fine-tunes the denoiser; the inference phase
processes the remaining slots slot by slot, reconstructing the CFR map from
denoised sub-CFR lattice points before data detection. Ground-truth CFRs
are consumed by metric computation (and by the explicit true-label
variants) only.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from chandenoise.channel import ChannelParams, NoiseParams, apply_channel, correlation_coeff, generate_channel
from chandenoise.data_aided import (
    IllPosedWindowError,
    WindowSize,
    collect_window,
    da_ls_estimate,
    optimize_window,
)
from chandenoise.datasets import (
    MapSpec,
    build_online_dataset,
    lattice_axes,
    lattice_windows,
    snr_db_to_sigma2,
)
from chandenoise.estimation import CfrEstimateMap, detect_grid, interpolate_2d, interpolate_lattice, ls_pilot_estimate
from chandenoise.grid import GridConfig, ResourceGrid, build_grid, qam_demodulate_hard
from chandenoise.network import ResidualDenoiser
from chandenoise.training import fine_tune

NMSE_FLOOR_DB = -100.0

METHODS = (
    "perfect-csir",
    "conventional-ce",
    "data-aided-ce",
    "transfer-pretrained",
    "meta-pretrained",
    "transfer-proposed",
    "meta-proposed",
    "transfer-truecfr",
    "meta-truecfr",
)
DENOISER_METHODS = tuple(m for m in METHODS if m.startswith(("transfer", "meta")))
FINETUNED_METHODS = tuple(m for m in DENOISER_METHODS if not m.endswith("pretrained"))


@dataclass(frozen=True)
class FineTuneSettings:
    steps: int
    lr: float
    sample_cap: int | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything one method needs to run over an SNR sweep."""

    grid: GridConfig
    map_spec: MapSpec
    test_channel: ChannelParams
    method: str
    snrs_db: tuple[float, ...]
    n_trials: int = 1
    base_seed: int = 0
    window_p: tuple[int, ...] = (1, 2, 4, 7)
    window_q: tuple[int, ...] = (1, 2, 3, 6)
    finetune: FineTuneSettings | None = None
    gram_draws: int = 200

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r} (choose from {METHODS})")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")


@dataclass
class TrialResult:
    method: str
    snr_db: float
    trial: int
    nmse_db: float
    fer: float
    ser: float
    p_star: int | None
    q_star: int | None
    n_frames: int
    n_data_symbols: int
    runtime_s: float


@dataclass
class MetricsReport:
    rows: list[TrialResult] = field(default_factory=list)

    def summary(self) -> list[dict]:
        """Median/mean aggregation per (method, snr)."""
        keys = sorted({(r.method, r.snr_db) for r in self.rows},
                      key=lambda x: (x[0], x[1]))
        out = []
        for method, snr in keys:
            sel = [r for r in self.rows if r.method == method and r.snr_db == snr]
            out.append({
                "method": method,
                "snr_db": snr,
                "n_trials": len(sel),
                "nmse_db_median": float(np.median([r.nmse_db for r in sel])),
                "nmse_db_mean": float(np.mean([r.nmse_db for r in sel])),
                "fer_mean": float(np.mean([r.fer for r in sel])),
                "ser_mean": float(np.mean([r.ser for r in sel])),
            })
        return out


def nmse_db(est: np.ndarray, truth: np.ndarray) -> float:
    """10 log10( sum|est-truth|^2 / sum|truth|^2 ), clamped at the floor."""
    if est.shape != truth.shape:
        raise ValueError("shape mismatch")
    denom = float(np.sum(np.abs(truth) ** 2))
    if denom <= 0.0:
        raise ValueError("zero-energy truth")
    ratio = float(np.sum(np.abs(est - truth) ** 2)) / denom
    if ratio <= 10.0 ** (NMSE_FLOOR_DB / 10.0):
        return NMSE_FLOOR_DB
    return max(10.0 * np.log10(ratio), NMSE_FLOOR_DB)


def frame_error_metrics(detected_bits: np.ndarray, true_bits: np.ndarray,
                        frame_size: int, bits_per_symbol: int = 2) -> tuple[float, float]:
    """(FER, SER) over aligned flat bit sequences; a frame is `frame_size`
    bits, a symbol is a bits-per-symbol group (pairs for 4-QAM)."""
    detected_bits = np.asarray(detected_bits).ravel()
    true_bits = np.asarray(true_bits).ravel()
    if detected_bits.shape != true_bits.shape:
        raise ValueError("length mismatch")
    if detected_bits.size % frame_size != 0:
        raise ValueError("bit count not a multiple of the frame size")
    errs = detected_bits != true_bits
    frames = errs.reshape(-1, frame_size)
    fer = float(np.mean(frames.any(axis=1)))
    ser = float(np.mean(errs.reshape(-1, bits_per_symbol).any(axis=1)))
    return fer, ser


def _slot_rows(cfg: GridConfig, slot: int) -> np.ndarray:
    return np.arange(slot * cfg.n_ofdm, (slot + 1) * cfg.n_ofdm)


def analytic_window(sc: ScenarioConfig, params: ChannelParams, sigma2: float):
    """(P*, Q*) from the analytic objective with uniform reliabilities."""
    eps = lambda p, q: correlation_coeff(p, q, params)
    return optimize_window(list(sc.window_p), list(sc.window_q), sc.grid.n_tx,
                           params.sigma_h2, sigma2, eps, n_draws=sc.gram_draws,
                           seed=sc.base_seed)


def _denoise_slot_lattice(model: ResidualDenoiser, noisy_map: CfrEstimateMap,
                          times: np.ndarray, freqs: np.ndarray, spec: MapSpec,
                          n_rx: int, n_tx: int) -> np.ndarray:
    """Denoise every complete window on the slot lattice; lattice points not
    covered by a window keep their noisy values."""
    lattice = noisy_map.est[np.ix_(times, freqs)].copy()  # (T, F, n_rx, n_tx)
    batch, slots_of = [], []
    for ts, ks in lattice_windows(times, freqs, spec):
        ti = np.searchsorted(times, ts)
        fj = np.searchsorted(freqs, ks)
        block = lattice[np.ix_(ti, fj)]
        for r in range(n_rx):
            for t in range(n_tx):
                cplx = block[:, :, r, t].T  # rows freq, cols time
                scale = max(float(np.sqrt(np.mean(np.abs(cplx) ** 2))), 1e-12)
                batch.append(np.stack([cplx.real, cplx.imag]) / scale)
                slots_of.append((ti, fj, r, t, scale))
    if not batch:
        return lattice
    denoised = model.denoise(np.asarray(batch, dtype=np.float32))
    for arr, (ti, fj, r, t, scale) in zip(denoised, slots_of):
        cplx = (arr[0] + 1j * arr[1]).T * scale  # back to (time, freq)
        lattice[np.ix_(ti, fj, [r], [t])] = cplx[:, :, None, None]
    return lattice


def run_trial(sc: ScenarioConfig, snr_db: float, trial: int,
              model: ResidualDenoiser | None = None) -> TrialResult:
    """One realization of Algorithm-style online processing for one method."""
    t0 = time.perf_counter()
    cfg = sc.grid
    snr_index = list(sc.snrs_db).index(snr_db) if snr_db in sc.snrs_db else 0
    ss = np.random.SeedSequence(entropy=sc.base_seed, spawn_key=(snr_index, trial))
    grid_ss, chan_ss, noise_ss, ft_ss = ss.spawn(4)
    sigma2 = snr_db_to_sigma2(snr_db, cfg.n_tx)

    params = replace(sc.test_channel, symbol_duration=cfg.symbol_duration,
                     delta_f=cfg.delta_f, seed=int(chan_ss.generate_state(1)[0]))
    grid = build_grid(cfg, np.random.default_rng(grid_ss))
    chan = generate_channel(cfg, params)
    y = apply_channel(grid, chan, NoiseParams(sigma2=sigma2,
                                              seed=int(noise_ss.generate_state(1)[0])))

    method = sc.method
    n_train = cfg.n_slots_train
    infer_slots = range(n_train, cfg.n_slots_total)
    pilot = ls_pilot_estimate(y, grid) if method != "perfect-csir" else None

    p_star = q_star = None
    adapted = None
    if method in DENOISER_METHODS:
        if model is None:
            raise ValueError(f"method {method!r} needs a pretrained model")
        adapted = model
    if method in FINETUNED_METHODS:
        # training phase: conventional estimation + detection per slot
        map_shape = (cfg.n_symbols_total, cfg.n_subcarriers, cfg.n_rx, cfg.n_tx)
        conv_map = np.full(map_shape, np.nan, dtype=np.complex128)
        det = None
        for slot in range(n_train):
            rows = _slot_rows(cfg, slot)
            interp = interpolate_2d(pilot, grid, rows=rows)
            conv_map[rows] = interp.est[rows]
            det = detect_grid(y, interp, grid, sigma2, rows=rows, into=det)
        wstar, _ = analytic_window(sc, params, sigma2)
        p_star, q_star = wstar.p, wstar.q
        online, _ = build_online_dataset(
            y, grid, det, CfrEstimateMap(est=conv_map, provenance="interpolated"),
            wstar, sc.map_spec, n_train,
            chan=chan if method.endswith("truecfr") else None,
            use_true_targets=method.endswith("truecfr"))
        ft = sc.finetune or FineTuneSettings(steps=30, lr=1e-3)
        adapted = fine_tune(model, online, steps=ft.steps, lr=ft.lr,
                            seed=int(ft_ss.generate_state(1)[0]),
                            sample_cap=ft.sample_cap)
    elif method == "data-aided-ce":
        wstar, _ = analytic_window(sc, params, sigma2)
        p_star, q_star = wstar.p, wstar.q

    # inference phase
    est_infer = np.zeros((len(list(infer_slots)), cfg.n_ofdm, cfg.n_subcarriers,
                          cfg.n_rx, cfg.n_tx), dtype=np.complex128)
    hard_infer = np.zeros((len(est_infer), cfg.n_ofdm, cfg.n_subcarriers, cfg.n_tx),
                          dtype=np.complex128)
    for i, slot in enumerate(infer_slots):
        rows = _slot_rows(cfg, slot)
        if method == "perfect-csir":
            slot_map = CfrEstimateMap(est=chan.cfr, provenance="denoised")
            det = detect_grid(y, slot_map, grid, sigma2, rows=rows)
            est_infer[i] = chan.cfr[rows]
        else:
            interp = interpolate_2d(pilot, grid, rows=rows)
            if method == "conventional-ce":
                det = detect_grid(y, interp, grid, sigma2, rows=rows)
                est_infer[i] = interp.est[rows]
            elif method == "data-aided-ce":
                det = detect_grid(y, interp, grid, sigma2, rows=rows)
                est_infer[i] = _data_aided_slot(y, grid, det, rows, wstar, sc.map_spec,
                                                fallback=interp.est[rows])
                det = _detect_with(y, grid, est_infer[i], rows, sigma2, "data-aided")
            else:
                est_infer[i] = _denoised_slot(adapted, interp, rows, sc.map_spec, cfg)
                det = _detect_with(y, grid, est_infer[i], rows, sigma2, "denoised")
        hard_infer[i] = det.hard_symbols[rows]

    # metrics: the only stage that touches the true CFR
    truth = np.stack([chan.cfr[_slot_rows(cfg, s)] for s in infer_slots])
    nmse = nmse_db(est_infer, truth)
    fer, ser, n_frames, n_syms = _bit_metrics(grid, hard_infer, list(infer_slots))
    return TrialResult(method=method, snr_db=snr_db, trial=trial, nmse_db=nmse,
                       fer=fer, ser=ser, p_star=p_star, q_star=q_star,
                       n_frames=n_frames, n_data_symbols=n_syms,
                       runtime_s=time.perf_counter() - t0)


def _detect_with(y, grid, slot_est: np.ndarray, rows: np.ndarray, sigma2: float,
                 provenance: str):
    cfg = grid.cfg
    full = np.full((cfg.n_symbols_total, cfg.n_subcarriers, cfg.n_rx, cfg.n_tx),
                   np.nan, dtype=np.complex128)
    full[rows] = slot_est
    return detect_grid(y, CfrEstimateMap(est=full, provenance=provenance),
                       grid, sigma2, rows=rows)


def _denoised_slot(model: ResidualDenoiser, interp: CfrEstimateMap, rows: np.ndarray,
                   spec: MapSpec, cfg: GridConfig) -> np.ndarray:
    """Denoise the slot's sub-CFR lattice and rebuild the full slot map.

    If the slot lattice cannot host a complete window the interpolated map is
    returned unchanged (fallback until enough sub-CFRs accumulate).
    """
    try:
        times_rel, freqs = lattice_axes(rows.size, cfg.n_subcarriers, spec)
    except ValueError:
        return interp.est[rows]
    times = rows[0] + times_rel
    lattice = _denoise_slot_lattice(model, interp, times, freqs, spec,
                                    cfg.n_rx, cfg.n_tx)
    return interpolate_lattice(lattice, times_rel, freqs, rows.size, cfg.n_subcarriers)


def _data_aided_slot(y, grid, det, rows, wstar: WindowSize, spec: MapSpec,
                     fallback: np.ndarray) -> np.ndarray:
    """Data-aided LS on the slot lattice, reconstructed to the full slot."""
    cfg = grid.cfg
    try:
        times_rel, freqs = lattice_axes(rows.size, cfg.n_subcarriers, spec)
    except ValueError:
        return fallback
    times = rows[0] + times_rel
    lattice = np.empty((times.size, freqs.size, cfg.n_rx, cfg.n_tx), dtype=np.complex128)
    bounds = (int(rows[0]), int(rows[-1]) + 1)
    for i, n in enumerate(times):
        for j, k in enumerate(freqs):
            try:
                w = collect_window(y, grid, det, (int(n), int(k)), wstar,
                                   time_bounds=bounds)
                lattice[i, j] = da_ls_estimate(w)
            except IllPosedWindowError:
                lattice[i, j] = fallback[int(n) - rows[0], int(k)]
    return interpolate_lattice(lattice, times_rel, freqs, rows.size, cfg.n_subcarriers)


def _bit_metrics(grid: ResourceGrid, hard_infer: np.ndarray, infer_slots: list[int]):
    cfg = grid.cfg
    det_bits, true_bits = [], []
    frame_sizes = set()
    for i, slot in enumerate(infer_slots):
        rows = _slot_rows(cfg, slot)
        mask = grid.data_mask[rows]
        hard = hard_infer[i][mask]  # (n_data, n_tx)
        bits, _ = qam_demodulate_hard(hard.ravel(), cfg.constellation)
        det_bits.append(bits.ravel())
        true_bits.append(grid.tx_bits[rows][mask].ravel())
        frame_sizes.add(det_bits[-1].size)
    if len(frame_sizes) != 1:
        raise RuntimeError("slots disagree on frame size")
    frame_size = frame_sizes.pop()
    det_flat = np.concatenate(det_bits)
    true_flat = np.concatenate(true_bits)
    fer, ser = frame_error_metrics(det_flat, true_flat, frame_size)
    return fer, ser, len(infer_slots), det_flat.size // 2


def _worker(args):
    sc, snr_db, trial, bundle = args
    model = None
    if bundle is not None:
        width, depth, in_ch, ks, theta = bundle
        model = ResidualDenoiser(width=width, depth=depth, in_channels=in_ch,
                                 kernel_size=ks)
        model.set_theta(theta)
    return run_trial(sc, snr_db, trial, model=model)


def run_online_procedure(sc: ScenarioConfig, model: ResidualDenoiser | None = None,
                         jobs: int = 1) -> MetricsReport:
    """All (snr, trial) cells for one method; trials parallelize across
    processes and results are reduced in deterministic (snr, trial) order."""
    if sc.method in DENOISER_METHODS and model is None:
        raise ValueError(f"method {sc.method!r} needs a pretrained model")
    bundle = None
    if model is not None:
        bundle = (model.width, model.depth, model.in_channels, model.kernel_size,
                  model.get_theta())
    cells = [(sc, snr, trial, bundle) for snr in sc.snrs_db
             for trial in range(sc.n_trials)]
    report = MetricsReport()
    if jobs <= 1 or len(cells) == 1:
        report.rows = [_worker(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            report.rows = list(pool.map(_worker, cells, chunksize=1))
    return report
