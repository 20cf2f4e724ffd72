"""Conventional receiver chain: pilot LS, 2D interpolation, LMMSE detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from chandenoise.grid import GridConfig, ResourceGrid, _gray_constellation

APP_FLOOR = 1e-3
# Guards the softmax scale when the post-LMMSE residual variance collapses
# (perfect CSI, sigma2 -> 0).
_VAR_FLOOR = 1e-30


@dataclass
class CfrEstimateMap:
    """Channel estimate aligned with the grid; NaN marks missing entries."""

    est: np.ndarray  # complex, (n_sym, K, n_rx, n_tx)
    provenance: str  # pilot-ls | interpolated | data-aided | denoised


@dataclass
class DetectionResult:
    """Per-RE LMMSE outputs on the full grid (data REs only are meaningful)."""

    hard_symbols: np.ndarray   # complex (n_sym, K, n_tx)
    soft_estimates: np.ndarray  # complex (n_sym, K, n_tx), bias-compensated
    app: np.ndarray            # float (n_sym, K), product of per-stream APPs
    app_per_stream: np.ndarray  # float (n_sym, K, n_tx)


def ls_pilot_estimate(y: np.ndarray, grid: ResourceGrid) -> CfrEstimateMap:
    """Per-RE LS at pilot positions: one comb port active per pilot RE.

    The active port's column of H is y * conj(x_p) / |x_p|^2; everything
    else stays NaN.
    """
    cfg = grid.cfg
    est = np.full(y.shape[:2] + (cfg.n_rx, cfg.n_tx), np.nan, dtype=np.complex128)
    ns, ks = np.nonzero(grid.pilot_mask)
    ports = grid.active_port[ns, ks]
    pilots = grid.tx_symbols[ns, ks, ports]
    if np.any(pilots == 0):
        raise ValueError("zero pilot symbol")
    est[ns, ks, :, ports] = y[ns, ks] * (np.conj(pilots) / np.abs(pilots) ** 2)[:, None]
    return CfrEstimateMap(est=est, provenance="pilot-ls")


def _interp_axis(values: np.ndarray, sample_pos: np.ndarray, out_len: int) -> np.ndarray:
    """Linear interpolation along axis 0 with edge-hold extrapolation.

    values has the samples on axis 0 (complex ok); remaining axes ride along.
    """
    if sample_pos.size == 0:
        raise ValueError("empty pilot set")
    targets = np.arange(out_len)
    if sample_pos.size == 1:
        return np.broadcast_to(values[0], (out_len,) + values.shape[1:]).copy()
    flat = values.reshape(values.shape[0], -1)
    out = np.empty((out_len, flat.shape[1]), dtype=values.dtype)
    for j in range(flat.shape[1]):
        if np.iscomplexobj(values):
            out[:, j] = (np.interp(targets, sample_pos, flat[:, j].real)
                         + 1j * np.interp(targets, sample_pos, flat[:, j].imag))
        else:
            out[:, j] = np.interp(targets, sample_pos, flat[:, j])
    return out.reshape((out_len,) + values.shape[1:])


def interpolate_lattice(values: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                        n_rows: int, n_cols: int) -> np.ndarray:
    """Bilinear interpolation from a rectangular lattice to a full grid.

    values[i, j, ...] lives at (rows[i], cols[j]); output covers
    (0..n_rows-1, 0..n_cols-1) with nearest-edge hold outside the lattice
    hull. Exact on fields affine in (row, col) inside the hull.
    """
    along_cols = _interp_axis(np.moveaxis(values, 1, 0), np.asarray(cols), n_cols)
    full = _interp_axis(np.moveaxis(along_cols, 1, 0), np.asarray(rows), n_rows)
    return full


def interpolate_2d(pilot_map: CfrEstimateMap, grid: ResourceGrid,
                   rows: np.ndarray | None = None) -> CfrEstimateMap:
    """Fill the grid from pilot-LS values via per-port bilinear interpolation.

    rows restricts the time span (e.g. one slot's symbol indices, for causal
    slot-by-slot processing); defaults to the whole grid. The returned map is
    full-grid shaped with NaN outside the requested rows. Each (port, rx)
    pair interpolates over its own pilot lattice (DM-RS symbols x comb
    subcarriers).
    """
    cfg = grid.cfg
    if rows is None:
        rows = np.arange(cfg.n_symbols_total)
    rows = np.asarray(rows)
    if not grid.pilot_mask[rows].any():
        raise ValueError("empty pilot set in requested rows")
    est = np.full((cfg.n_symbols_total, cfg.n_subcarriers, cfg.n_rx, cfg.n_tx),
                  np.nan, dtype=np.complex128)
    pilot_times = rows[grid.pilot_mask[rows].any(axis=1)]
    pilot_time_pos = np.searchsorted(rows, pilot_times)  # positions within `rows`
    for port in range(cfg.n_tx):
        ks = np.nonzero(grid.active_port[pilot_times[0]] == port)[0]
        lattice = pilot_map.est[np.ix_(pilot_times, ks)][:, :, :, port]  # (T, F, n_rx)
        est[rows, :, :, port] = interpolate_lattice(
            lattice, pilot_time_pos, ks, rows.size, cfg.n_subcarriers)
    return CfrEstimateMap(est=est, provenance="interpolated")


def lmmse_detect(y: np.ndarray, h_est: np.ndarray, sigma2: float, order: int,
                 hard_override: np.ndarray | None = None) -> DetectionResult:
    """Batched per-RE LMMSE detection with Gaussian-residual APPs.

    y: (..., n_rx), h_est: (..., n_rx, n_tx). The soft estimate is the
    bias-compensated LMMSE output z = x_tilde / diag(WH); hard decisions
    slice z to the nearest constellation point; the APP of each stream is a
    softmax of negative scaled distances under the per-stream post-LMMSE
    residual variance, clamped to [APP_FLOOR, 1].
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be > 0")
    const = _gray_constellation(order)
    lead = y.shape[:-1]
    n_rx = y.shape[-1]
    n_tx = h_est.shape[-1]
    h = h_est.reshape(-1, n_rx, n_tx)
    yv = y.reshape(-1, n_rx)

    hh = np.conj(np.swapaxes(h, 1, 2))          # (N, n_tx, n_rx)
    gram = hh @ h                               # H^H H
    a = gram + sigma2 * np.eye(n_tx)
    a_inv = np.linalg.inv(a)
    x_tilde = np.einsum("bij,bj->bi", a_inv @ hh, yv)
    g = a_inv @ gram                            # bias matrix W H
    g_diag = np.einsum("bii->bi", g)
    # residual variance: noise through W plus inter-stream leakage
    ww_h = g @ a_inv                            # W W^H for hermitian A
    noise_var = sigma2 * np.real(np.einsum("bii->bi", ww_h))
    leakage = np.sum(np.abs(g) ** 2, axis=2) - np.abs(g_diag) ** 2
    denom = np.where(np.abs(g_diag) < 1e-12, 1.0, g_diag)
    z = x_tilde / denom
    var_z = (noise_var + leakage) / np.maximum(np.abs(denom) ** 2, 1e-24)
    var_z = np.maximum(var_z, _VAR_FLOOR)

    d2 = np.abs(z[..., None] - const) ** 2      # (N, n_tx, order)
    if hard_override is None:
        idx = np.argmin(d2, axis=-1)
    else:
        idx = hard_override.reshape(-1, n_tx)
    scaled = -d2 / var_z[..., None]
    scaled -= scaled.max(axis=-1, keepdims=True)
    probs = np.exp(scaled)
    probs /= probs.sum(axis=-1, keepdims=True)
    app_stream = np.take_along_axis(probs, idx[..., None], axis=-1)[..., 0]
    app_stream = np.clip(app_stream, APP_FLOOR, 1.0)

    hard = const[idx]
    return DetectionResult(
        hard_symbols=hard.reshape(lead + (n_tx,)),
        soft_estimates=z.reshape(lead + (n_tx,)),
        app=np.prod(app_stream, axis=-1).reshape(lead),
        app_per_stream=app_stream.reshape(lead + (n_tx,)),
    )


def detect_grid(y: np.ndarray, h_map: CfrEstimateMap, grid: ResourceGrid, sigma2: float,
                rows: np.ndarray | None = None,
                into: DetectionResult | None = None) -> DetectionResult:
    """Run LMMSE detection on the data REs of the given rows of the grid.

    Returns full-grid-shaped arrays; only the requested rows are filled.
    Pilot REs get hard symbol 0 and APP 1 (pilots are known, maximally
    reliable virtual references). Pass `into` to accumulate slot results
    in one buffer across causal slot-by-slot calls.
    """
    cfg = grid.cfg
    if rows is None:
        rows = np.arange(cfg.n_symbols_total)
    rows = np.asarray(rows)
    if into is None:
        shape = (cfg.n_symbols_total, cfg.n_subcarriers)
        into = DetectionResult(
            hard_symbols=np.zeros(shape + (cfg.n_tx,), dtype=np.complex128),
            soft_estimates=np.zeros(shape + (cfg.n_tx,), dtype=np.complex128),
            app=np.ones(shape),
            app_per_stream=np.ones(shape + (cfg.n_tx,)),
        )
    sub_n, ks = np.nonzero(grid.data_mask[rows])
    ns = rows[sub_n]
    det = lmmse_detect(y[ns, ks], h_map.est[ns, ks], sigma2, cfg.constellation)
    into.hard_symbols[ns, ks] = det.hard_symbols
    into.soft_estimates[ns, ks] = det.soft_estimates
    into.app[ns, ks] = det.app
    into.app_per_stream[ns, ks] = det.app_per_stream
    return into
