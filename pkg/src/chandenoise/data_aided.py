"""Data-aided channel estimation with virtual pilots and window-size optimization.

Detected data symbols inside a (2P+1) x (2Q+1) time-frequency window around a
target RE are reused as virtual reference signals; an LS fit over the window
averages the noise down. The window size trades correlation loss (CFRs far
from the center drift away) against virtual-pilot count, and the analytic
MSE objective picks the best (P, Q) from candidate lists.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from chandenoise.estimation import DetectionResult
from chandenoise.grid import ResourceGrid, qam_modulate

GRAM_CONDITION_LIMIT = 1e12

EpsFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
RelFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class IllPosedWindowError(RuntimeError):
    """Window cannot support LS estimation (too few columns or singular Gram)."""

    def __init__(self, msg: str, condition: float | None = None):
        super().__init__(msg)
        self.condition = condition


def uniform_reliability(p, q):
    """r = 1 everywhere (the optimizer default)."""
    return np.ones(np.broadcast(np.asarray(p), np.asarray(q)).shape)


@dataclass(frozen=True)
class WindowSize:
    p: int
    q: int

    def __post_init__(self):
        if self.p < 0 or self.q < 0:
            raise ValueError("window half-ranges must be >= 0")

    @property
    def m(self) -> int:
        """Number of REs in the full (unclipped) window."""
        return (2 * self.p + 1) * (2 * self.q + 1)

    def offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-major (p, q) offset arrays, time offset outer, frequency inner."""
        ps = np.repeat(np.arange(-self.p, self.p + 1), 2 * self.q + 1)
        qs = np.tile(np.arange(-self.q, self.q + 1), 2 * self.p + 1)
        return ps, qs


@dataclass
class WindowSample:
    """Received and virtual-pilot matrices collected around one center RE."""

    y_mat: np.ndarray          # (n_rx, M)
    x_mat: np.ndarray          # (n_tx, M)
    reliabilities: np.ndarray  # (M,)
    offsets: np.ndarray        # (2, M), the surviving (p, q) per column
    eps: np.ndarray | None = None  # (M,), filled when an eps function is supplied


def collect_window(y: np.ndarray, grid: ResourceGrid, detections: DetectionResult,
                   center: tuple[int, int], w: WindowSize,
                   eps_fn: EpsFn | None = None,
                   time_bounds: tuple[int, int] | None = None) -> WindowSample:
    """Gather received signals and virtual pilots around `center`.

    Columns enumerate (p, q) offsets row-major; coordinates falling off the
    grid (or outside time_bounds, e.g. the online training period) are
    dropped. Pilot REs contribute the true pilots, data REs the detected
    symbols.
    """
    n_sym, n_sc = grid.pilot_mask.shape
    t_lo, t_hi = time_bounds if time_bounds is not None else (0, n_sym)
    n0, k0 = center
    if not (t_lo <= n0 < t_hi and 0 <= k0 < n_sc):
        raise ValueError(f"center {center} outside grid/time bounds")

    ps, qs = w.offsets()
    ns, ks = n0 + ps, k0 + qs
    keep = (ns >= t_lo) & (ns < t_hi) & (ks >= 0) & (ks < n_sc)
    ns, ks, ps, qs = ns[keep], ks[keep], ps[keep], qs[keep]
    m = ns.size
    if m < grid.cfg.n_tx:
        raise IllPosedWindowError(f"window at {center} has {m} columns < n_tx")

    is_pilot = grid.pilot_mask[ns, ks]
    x_mat = np.where(is_pilot[None, :], grid.tx_symbols[ns, ks].T,
                     detections.hard_symbols[ns, ks].T)
    rel = np.where(is_pilot, 1.0, detections.app[ns, ks])
    sample = WindowSample(
        y_mat=y[ns, ks].T.copy(),
        x_mat=x_mat,
        reliabilities=rel,
        offsets=np.stack([ps, qs]),
        eps=None if eps_fn is None else np.asarray(eps_fn(ps, qs)),
    )
    return sample


def da_ls_estimate(w: WindowSample) -> np.ndarray:
    """LS over the window: H_tilde = Y X^H (X X^H)^{-1}, shape (n_rx, n_tx)."""
    x = w.x_mat
    gram = x @ np.conj(x.T)
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > GRAM_CONDITION_LIMIT:
        raise IllPosedWindowError(f"virtual-pilot Gram condition {cond:.3e} too large",
                                  condition=float(cond))
    return w.y_mat @ np.conj(x.T) @ np.linalg.inv(gram)


def xi(w: WindowSize, eps_fn: EpsFn, rel_fn: RelFn = uniform_reliability) -> complex:
    """Window-averaged correlation-reliability product over the full window.

    No boundary clipping: the analytic objective models the interior case.
    """
    ps, qs = w.offsets()
    return complex(np.sum(np.asarray(eps_fn(ps, qs)) * np.asarray(rel_fn(ps, qs))) / w.m)


def expected_gram_trace(n_tx: int, m: int, order: int = 4, n_draws: int = 200,
                        seed: int = 0) -> float:
    """Monte Carlo E[Tr((X X^H)^{-1})] over random unit-power QAM matrices.

    Random columns make the estimate position-independent, so the window
    optimization is solved once for a representative position.
    """
    rng = np.random.default_rng(seed)
    mbits = int(np.log2(order))
    total = 0.0
    for _ in range(n_draws):
        bits = rng.integers(0, 2, size=n_tx * m * mbits)
        x = qam_modulate(bits, order).reshape(n_tx, m)
        total += float(np.trace(np.linalg.inv(x @ np.conj(x.T))).real)
    return total / n_draws


def mse_objective(w: WindowSize, n_tx: int, sigma_h2: float, sigma2: float,
                  eps_fn: EpsFn, rel_fn: RelFn = uniform_reliability,
                  gram_trace: Callable[[int, int], float] | None = None,
                  n_draws: int = 200, seed: int = 0) -> tuple[float, float, float]:
    """Analytic DA estimation MSE proxy: (term1, term2, total).

    term1 = |1 - xi|^2 * n_tx * sigma_h2 / sigma2 penalizes correlation loss;
    term2 = E[Tr((X X^H)^{-1})] rewards extra virtual pilots. Multiply the
    total by n_rx * sigma2 to get the absolute MSE bound in channel units.
    """
    if w.m < n_tx:
        raise IllPosedWindowError(f"window {w} has fewer columns than n_tx")
    xival = xi(w, eps_fn, rel_fn)
    term1 = abs(1.0 - xival) ** 2 * n_tx * sigma_h2 / sigma2
    if gram_trace is not None:
        term2 = gram_trace(n_tx, w.m)
    else:
        term2 = expected_gram_trace(n_tx, w.m, n_draws=n_draws, seed=seed)
    return term1, term2, term1 + term2


def optimize_window(candidates_p: list[int], candidates_q: list[int], n_tx: int,
                    sigma_h2: float, sigma2: float, eps_fn: EpsFn,
                    rel_fn: RelFn = uniform_reliability,
                    n_draws: int = 200, seed: int = 0) -> tuple[WindowSize, list[dict]]:
    """Exhaustive search over the candidate grid; returns (best, objective table).

    Ties break toward the smaller window, then the smaller time range.
    """
    if not candidates_p or not candidates_q:
        raise ValueError("candidate lists must be non-empty")
    table = []
    best = None
    best_key = None
    for p in candidates_p:
        for q in candidates_q:
            w = WindowSize(p, q)
            try:
                t1, t2, total = mse_objective(w, n_tx, sigma_h2, sigma2, eps_fn,
                                              rel_fn, n_draws=n_draws, seed=seed)
            except IllPosedWindowError:
                table.append({"p": p, "q": q, "m": w.m, "term1": np.nan,
                              "term2": np.nan, "total": np.nan})
                continue
            table.append({"p": p, "q": q, "m": w.m, "term1": t1, "term2": t2,
                          "total": total})
            key = (total, w.m, p)
            if best_key is None or key < best_key:
                best, best_key = w, key
    if best is None:
        raise IllPosedWindowError("no well-posed window among the candidates")
    return best, table
