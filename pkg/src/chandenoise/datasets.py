"""Sub-CFR sample construction: offline, online and episodic datasets."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from chandenoise.channel import ChannelParams, ChannelRealization, NoiseParams, apply_channel, generate_channel
from chandenoise.data_aided import IllPosedWindowError, WindowSize, collect_window, da_ls_estimate
from chandenoise.estimation import CfrEstimateMap, detect_grid, interpolate_2d, ls_pilot_estimate
from chandenoise.grid import GridConfig, ResourceGrid, build_grid

_DATASET_MAGIC = b"SCFR"
_DATASET_VERSION = 1
_TARGET_KIND_CODE = {"true": 0, "data-aided": 1}
_TARGET_KIND_NAME = {v: k for k, v in _TARGET_KIND_CODE.items()}


@dataclass(frozen=True)
class MapSpec:
    """Sub-sampling lattice and window geometry for sub-CFR maps."""

    m_f: int = 16          # frequency lattice points per map (rows)
    m_t: int = 7           # time lattice points per map (columns)
    stride_f: int = 2
    stride_t: int = 2

    def __post_init__(self):
        if min(self.m_f, self.m_t) < 3:
            raise ValueError("map sides must be >= 3 (conv kernel support)")
        if min(self.stride_f, self.stride_t) < 1:
            raise ValueError("strides must be >= 1")


@dataclass
class SubCfrSample:
    """One (noisy, target) map pair for a single antenna pair.

    Maps are 2-channel real arrays (real, imag) of shape (2, m_f, m_t),
    scaled by 1/scale so the network sees unit-RMS inputs; multiply by
    `scale` to restore channel units. `center` is the (time, frequency)
    lattice index of the window's last point.
    """

    noisy: np.ndarray
    target: np.ndarray
    antenna_pair: tuple[int, int]
    center: tuple[int, int]
    scale: float
    target_kind: str


@dataclass
class Dataset:
    samples: list[SubCfrSample]
    kind: str  # offline | online | support | query

    def __len__(self):
        return len(self.samples)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (noisy, target) training arrays, shape (N, 2, m_f, m_t)."""
        if not self.samples:
            raise ValueError("empty dataset")
        noisy = np.stack([s.noisy for s in self.samples])
        target = np.stack([s.target for s in self.samples])
        return noisy, target

    def subset(self, index) -> "Dataset":
        return Dataset(samples=[self.samples[i] for i in index], kind=self.kind)


@dataclass
class LabelQuality:
    """Per-sample NMSE of inputs and targets against the true sub-CFR maps."""

    input_nmse: np.ndarray
    target_nmse: np.ndarray

    @property
    def mean_input_nmse_db(self) -> float:
        return 10.0 * np.log10(np.mean(self.input_nmse))

    @property
    def mean_target_nmse_db(self) -> float:
        return 10.0 * np.log10(np.mean(self.target_nmse))


def subsample_grid(n_symbols: int, n_subcarriers: int, spec: MapSpec) -> list[tuple[int, int]]:
    """Uniform sub-sampling lattice n_i = i*s_t, k_j = j*s_f over the grid.

    Returns every lattice point as a (symbol, subcarrier) pair; fails if the
    lattice cannot host a single m_f x m_t window.
    """
    times, freqs = lattice_axes(n_symbols, n_subcarriers, spec)
    return [(int(n), int(k)) for n in times for k in freqs]


def lattice_axes(n_symbols: int, n_subcarriers: int, spec: MapSpec) -> tuple[np.ndarray, np.ndarray]:
    times = np.arange(0, n_symbols, spec.stride_t)
    freqs = np.arange(0, n_subcarriers, spec.stride_f)
    if times.size < spec.m_t or freqs.size < spec.m_f:
        raise ValueError(
            f"lattice {times.size}x{freqs.size} cannot host a {spec.m_t}x{spec.m_f} window")
    return times, freqs


def lattice_windows(times: np.ndarray, freqs: np.ndarray, spec: MapSpec):
    """Non-overlapping tiling of the lattice into m_t x m_f windows."""
    for wi in range(times.size // spec.m_t):
        ts = times[wi * spec.m_t:(wi + 1) * spec.m_t]
        for wj in range(freqs.size // spec.m_f):
            ks = freqs[wj * spec.m_f:(wj + 1) * spec.m_f]
            yield ts, ks


def complex_to_channels(m: np.ndarray) -> np.ndarray:
    """Complex (m_f, m_t) map -> real (2, m_f, m_t) array."""
    return np.stack([m.real, m.imag]).astype(np.float32)


def channels_to_complex(a: np.ndarray) -> np.ndarray:
    return a[..., 0, :, :] + 1j * a[..., 1, :, :]


def _window_samples(noisy_c: np.ndarray, target_c: np.ndarray, ts, ks,
                    target_kind: str, true_c: np.ndarray | None = None):
    """Build per-antenna-pair samples from complex (T, F, n_rx, n_tx) blocks."""
    samples, quality = [], []
    n_rx, n_tx = noisy_c.shape[2:]
    center = (int(ts[-1]), int(ks[-1]))
    for r in range(n_rx):
        for t in range(n_tx):
            noisy = noisy_c[:, :, r, t].T     # rows frequency, cols time
            target = target_c[:, :, r, t].T
            scale = float(np.sqrt(np.mean(np.abs(noisy) ** 2)))
            scale = max(scale, 1e-12)
            samples.append(SubCfrSample(
                noisy=complex_to_channels(noisy / scale),
                target=complex_to_channels(target / scale),
                antenna_pair=(r, t), center=center, scale=scale,
                target_kind=target_kind))
            if true_c is not None:
                true = true_c[:, :, r, t].T
                denom = max(np.sum(np.abs(true) ** 2), 1e-30)
                quality.append((np.sum(np.abs(noisy - true) ** 2) / denom,
                                np.sum(np.abs(target - true) ** 2) / denom))
    return samples, quality


def build_online_dataset(y: np.ndarray, grid: ResourceGrid, detections,
                         noisy_map: CfrEstimateMap, wstar: WindowSize, spec: MapSpec,
                         n_train_slots: int,
                         chan: ChannelRealization | None = None,
                         use_true_targets: bool = False) -> tuple[Dataset, LabelQuality | None]:
    """Pair pilot-interpolated sub-CFR maps with data-aided targets.

    Covers the first `n_train_slots` slots. With use_true_targets (the ideal
    label variant) the targets come from `chan` instead of the data-aided
    estimates; `chan` also enables the label-quality report.
    """
    cfg = grid.cfg
    if n_train_slots < 1:
        raise ValueError("need at least one training slot")
    if use_true_targets and chan is None:
        raise ValueError("true targets require the channel realization")
    t_max = n_train_slots * cfg.n_ofdm
    times, freqs = lattice_axes(t_max, cfg.n_subcarriers, spec)

    da = np.zeros((times.size, freqs.size, cfg.n_rx, cfg.n_tx), dtype=np.complex128)
    ok = np.ones((times.size, freqs.size), dtype=bool)
    if not use_true_targets:
        for i, n in enumerate(times):
            for j, k in enumerate(freqs):
                try:
                    w = collect_window(y, grid, detections, (int(n), int(k)), wstar,
                                       time_bounds=(0, t_max))
                    da[i, j] = da_ls_estimate(w)
                except IllPosedWindowError:
                    ok[i, j] = False

    samples: list[SubCfrSample] = []
    quality: list[tuple[float, float]] = []
    t_pos = {int(n): i for i, n in enumerate(times)}
    f_pos = {int(k): j for j, k in enumerate(freqs)}
    for ts, ks in lattice_windows(times, freqs, spec):
        ti = [t_pos[int(n)] for n in ts]
        fj = [f_pos[int(k)] for k in ks]
        if not use_true_targets and not ok[np.ix_(ti, fj)].all():
            continue
        noisy_c = noisy_map.est[np.ix_(ts, ks)]
        true_c = chan.cfr[np.ix_(ts, ks)] if chan is not None else None
        target_c = true_c if use_true_targets else da[np.ix_(ti, fj)]
        kind = "true" if use_true_targets else "data-aided"
        s, q = _window_samples(noisy_c, target_c, ts, ks, kind, true_c)
        samples.extend(s)
        quality.extend(q)

    if not samples:
        raise ValueError("online dataset came out empty")
    dataset = Dataset(samples=samples, kind="online")
    report = None
    if chan is not None:
        arr = np.asarray(quality)
        report = LabelQuality(input_nmse=arr[:, 0], target_nmse=arr[:, 1])
    return dataset, report


@dataclass(frozen=True)
class OfflineDistribution:
    """Sampling distribution for offline (true-label) data generation."""

    grid: GridConfig
    spec: MapSpec
    channel_templates: tuple[ChannelParams, ...]
    snrs_db: tuple[float, ...]

    def __post_init__(self):
        if not self.channel_templates or not self.snrs_db:
            raise ValueError("need at least one channel template and one SNR")


def snr_db_to_sigma2(snr_db: float, n_tx: int) -> float:
    """SNR is defined as n_tx / sigma2."""
    return n_tx / (10.0 ** (snr_db / 10.0))


def _one_realization(dist: OfflineDistribution, template: ChannelParams,
                     snr_db: float, seed: int):
    cfg = dist.grid
    params = ChannelParams(pdp=template.pdp, doppler_hz=template.doppler_hz,
                           symbol_duration=cfg.symbol_duration, delta_f=cfg.delta_f,
                           sigma_h2=template.sigma_h2, seed=seed)
    grid = build_grid(cfg, np.random.default_rng((seed, 1)))
    chan = generate_channel(cfg, params)
    sigma2 = snr_db_to_sigma2(snr_db, cfg.n_tx)
    y = apply_channel(grid, chan, NoiseParams(sigma2=sigma2, seed=seed + 2))
    pilot = ls_pilot_estimate(y, grid)
    full = np.full_like(chan.cfr, np.nan)
    for slot in range(cfg.n_slots_total):
        rows = np.arange(slot * cfg.n_ofdm, (slot + 1) * cfg.n_ofdm)
        full[rows] = interpolate_2d(pilot, grid, rows=rows).est[rows]
    return grid, chan, CfrEstimateMap(est=full, provenance="interpolated")


def build_offline_dataset(dist: OfflineDistribution, n_samples: int,
                          rng: np.random.Generator) -> Dataset:
    """True-labelled samples drawn over the configured channel/SNR mixture."""
    cfg = dist.grid
    times, freqs = lattice_axes(cfg.n_symbols_total, cfg.n_subcarriers, dist.spec)
    samples: list[SubCfrSample] = []
    while len(samples) < n_samples:
        template = dist.channel_templates[rng.integers(len(dist.channel_templates))]
        snr_db = dist.snrs_db[rng.integers(len(dist.snrs_db))]
        seed = int(rng.integers(2 ** 62))
        _, chan, noisy_map = _one_realization(dist, template, snr_db, seed)
        for ts, ks in lattice_windows(times, freqs, dist.spec):
            noisy_c = noisy_map.est[np.ix_(ts, ks)]
            true_c = chan.cfr[np.ix_(ts, ks)]
            s, _ = _window_samples(noisy_c, true_c, ts, ks, "true")
            samples.extend(s)
    return Dataset(samples=samples[:n_samples], kind="offline")


@dataclass
class MetaTask:
    """One episodic task: a channel condition with support and query splits."""

    params: ChannelParams
    snr_db: float
    support: Dataset
    query: Dataset


def make_meta_tasks(dist: OfflineDistribution, n_tasks: int, n_sup: int, n_que: int,
                    rng: np.random.Generator) -> list[MetaTask]:
    """Episodic tasks, each pinned to one (channel template, SNR) condition."""
    if n_sup < 1 or n_que < 1:
        raise ValueError("support and query sizes must be >= 1")
    tasks = []
    for _ in range(n_tasks):
        template = dist.channel_templates[rng.integers(len(dist.channel_templates))]
        snr_db = float(dist.snrs_db[rng.integers(len(dist.snrs_db))])
        task_dist = OfflineDistribution(grid=dist.grid, spec=dist.spec,
                                        channel_templates=(template,),
                                        snrs_db=(snr_db,))
        data = build_offline_dataset(task_dist, n_sup + n_que, rng)
        tasks.append(MetaTask(
            params=template, snr_db=snr_db,
            support=Dataset(samples=data.samples[:n_sup], kind="support"),
            query=Dataset(samples=data.samples[n_sup:], kind="query")))
    return tasks


def save_dataset(dataset: Dataset, path) -> Path:
    """Write the binary container and a CSV manifest next to it."""
    path = Path(path)
    if not dataset.samples:
        raise ValueError("refusing to save an empty dataset")
    m_f, m_t = dataset.samples[0].noisy.shape[1:]
    with open(path, "wb") as f:
        f.write(_DATASET_MAGIC)
        kind = dataset.kind.encode()[:16].ljust(16, b"\0")
        f.write(struct.pack("<I16sIIII", _DATASET_VERSION, kind, len(dataset.samples),
                            2, m_f, m_t))
        for s in dataset.samples:
            f.write(struct.pack("<HHIIfB", s.antenna_pair[0], s.antenna_pair[1],
                                s.center[0], s.center[1], s.scale,
                                _TARGET_KIND_CODE[s.target_kind]))
            f.write(s.noisy.astype("<f4").tobytes())
            f.write(s.target.astype("<f4").tobytes())
    manifest = path.with_suffix(path.suffix + ".manifest.csv")
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "rx", "tx", "center_t", "center_f", "scale", "target_kind"])
        for i, s in enumerate(dataset.samples):
            writer.writerow([i, s.antenna_pair[0], s.antenna_pair[1],
                             s.center[0], s.center[1], f"{s.scale:.8e}", s.target_kind])
    return manifest


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        if f.read(4) != _DATASET_MAGIC:
            raise ValueError(f"{path}: not a sub-CFR dataset")
        version, kind, count, chans, m_f, m_t = struct.unpack("<I16sIIII", f.read(36))
        if version != _DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        kind = kind.rstrip(b"\0").decode()
        n_map = chans * m_f * m_t
        samples = []
        for _ in range(count):
            rx, tx, ct, cf, scale, tk = struct.unpack("<HHIIfB", f.read(17))
            noisy = np.frombuffer(f.read(4 * n_map), dtype="<f4").reshape(chans, m_f, m_t)
            target = np.frombuffer(f.read(4 * n_map), dtype="<f4").reshape(chans, m_f, m_t)
            samples.append(SubCfrSample(noisy=noisy.copy(), target=target.copy(),
                                        antenna_pair=(rx, tx), center=(ct, cf),
                                        scale=scale, target_kind=_TARGET_KIND_NAME[tk]))
    return Dataset(samples=samples, kind=kind)
